use super::tape::*;
use super::Tensor;
use crate::error::Error;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tape_with(data: Vec<f64>) -> (Tape, Var) {
    let mut tape = Tape::new();
    let len = data.len();
    let v = tape.constant(vec![len], data).unwrap();
    (tape, v)
}

#[test]
fn sigmoid_at_zero_is_half() {
    let (mut tape, x) = tape_with(vec![0.0, 0.0]);
    let y = tape.sigmoid(x);
    assert_eq!(tape.value(y), &[0.5, 0.5]);
}

#[test]
fn tanh_is_odd_at_origin() {
    let (mut tape, x) = tape_with(vec![0.0]);
    let y = tape.tanh(x);
    assert_eq!(tape.value(y), &[0.0]);
}

#[test]
fn elementwise_product() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![2], vec![3.0, 4.0]).unwrap();
    let y = tape.mul(a, b).unwrap();
    assert_eq!(tape.value(y), &[3.0, 8.0]);
}

#[test]
fn binary_ops_reject_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
    for result in [tape.add(a, b), tape.sub(a, b), tape.mul(a, b)] {
        assert!(matches!(result, Err(Error::ShapeMismatch { .. })));
    }
}

#[test]
fn matmul_identity_and_hand_example() {
    let mut tape = Tape::new();
    let eye = tape.constant(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let m = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let y = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(vec![1, 2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![2, 1], vec![3.0, 4.0]).unwrap();
    let prod = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(prod), &[11.0]);

    let zero = tape.constant(vec![2, 2], vec![0.0; 4]).unwrap();
    let z = tape.matmul(zero, m).unwrap();
    assert!(tape.value(z).iter().all(|&v| v == 0.0));

    let bad = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(tape.matmul(m, bad).is_err());
}

#[test]
fn softmax_examples_and_simplex() {
    let (mut tape, x) = tape_with(vec![0.0, 0.0, 0.0]);
    let y = tape.softmax(x).unwrap();
    for &v in tape.value(y) {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // Shift invariance keeps huge equal inputs finite.
    let (mut tape, x) = tape_with(vec![1000.0, 1000.0]);
    let y = tape.softmax(x).unwrap();
    assert_eq!(tape.value(y), &[0.5, 0.5]);

    let (mut tape, x) = tape_with(vec![2.0f64.ln(), 0.0]);
    let y = tape.softmax(x).unwrap();
    let v = tape.value(y);
    assert!((v[0] - 2.0 / 3.0).abs() < 1e-12);
    assert!((v[1] - 1.0 / 3.0).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..200 {
        let n = rng.gen_range(1..12);
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let (mut tape, x) = tape_with(data);
        let y = tape.softmax(x).unwrap();
        let v = tape.value(y);
        assert!(v.iter().all(|&p| p >= 0.0));
        assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
}

#[test]
fn conv_width_one_is_pointwise() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![0.5, -0.25, 2.0]).unwrap();
    let w = tape.constant(vec![1, 1, 1], vec![1.0]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let pre = tape.conv_wide(x, w, b).unwrap();
    let y = tape.tanh(pre);
    assert_eq!(tape.shape(y), &[1, 3]);
    for (got, want) in tape.value(y).iter().zip([0.5f64, -0.25, 2.0]) {
        assert!((got - want.tanh()).abs() < 1e-15);
    }
}

#[test]
fn conv_output_length_is_t_plus_l_minus_one() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let w = tape.constant(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv_wide(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 4]);
}

#[test]
fn conv_sliding_window_sums() {
    // seq [1,2,3], filter [1,1]: padded windows give [1, 3, 5, 3].
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
    let w = tape.constant(vec![1, 1, 2], vec![1.0, 1.0]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv_wide(x, w, b).unwrap();
    assert_eq!(tape.value(y), &[1.0, 3.0, 5.0, 3.0]);
}

#[test]
fn conv_width_larger_than_sequence_is_permitted() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let w = tape.constant(vec![1, 1, 5], vec![1.0; 5]).unwrap();
    let b = tape.constant(vec![1], vec![0.0]).unwrap();
    let y = tape.conv_wide(x, w, b).unwrap();
    assert_eq!(tape.shape(y), &[1, 6]);
}

#[test]
fn conv_length_property_over_random_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = rng.gen_range(1..9);
        let l = rng.gen_range(1..7);
        let c_in = rng.gen_range(1..4);
        let c_out = rng.gen_range(1..4);
        let mut tape = Tape::new();
        let x = tape.constant(vec![c_in, t], vec![0.1; c_in * t]).unwrap();
        let w = tape.constant(vec![c_out, c_in, l], vec![0.1; c_out * c_in * l]).unwrap();
        let b = tape.constant(vec![c_out], vec![0.0; c_out]).unwrap();
        let y = tape.conv_wide(x, w, b).unwrap();
        assert_eq!(tape.shape(y), &[c_out, t + l - 1]);
    }
}

#[test]
fn max_pool_rows_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(vec![1, 3], vec![1.0, 5.0, 3.0]).unwrap();
    let y = tape.max_pool_rows(x).unwrap();
    assert_eq!(tape.value(y), &[5.0]);

    let m = tape.constant(vec![2, 2], vec![-1.0, -3.0, 4.0, 0.0]).unwrap();
    let p = tape.max_pool_rows(m).unwrap();
    assert_eq!(tape.value(p), &[-1.0, 4.0]);
}

#[test]
fn max_pool_ties_route_gradient_to_first_index() {
    let mut tape = Tape::new();
    let x = Tensor::matrix(1, 3, vec![2.0, 2.0, 2.0]).unwrap();
    let xv = tape.leaf(&x, true);
    let y = tape.max_pool_rows(xv).unwrap();
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn max_pool_rejects_empty_time_axis() {
    let mut tape = Tape::new();
    // Zero extent cannot even be constructed through constant(); check the
    // shape gate directly with a 1-column matrix reshaped away.
    let x = tape.constant(vec![2, 1], vec![1.0, 2.0]).unwrap();
    assert!(tape.max_pool_rows(x).is_ok());
    let v = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    assert!(tape.max_pool_rows(v).is_err());
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let b = tape.constant(vec![1], vec![3.0]).unwrap();
    let y = tape.concat(&[a, b], 0).unwrap();
    assert_eq!(tape.value(y), &[1.0, 2.0, 3.0]);

    let single = tape.concat(&[a], 0).unwrap();
    assert_eq!(tape.value(single), tape.value(a));

    let m1 = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let m2 = tape.constant(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
    let wide = tape.concat(&[m1, m2], 1).unwrap();
    assert_eq!(tape.shape(wide), &[2, 4]);
    assert_eq!(tape.value(wide), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);

    let odd = tape.constant(vec![3, 2], vec![0.0; 6]).unwrap();
    assert!(tape.concat(&[m1, odd], 1).is_err());
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let w = Tensor::vector(vec![0.3, -1.0, 2.5]);
    let wv = tape.leaf(&w, true);
    let loss = tape.sum(wv);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(wv).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_of_square_sum_is_two_w() {
    let mut tape = Tape::new();
    let w = Tensor::vector(vec![3.0]);
    let wv = tape.leaf(&w, true);
    let sq = tape.mul(wv, wv).unwrap();
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(wv).unwrap(), &[6.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let w = Tensor::vector(vec![1.0, 2.0]);
    let wv = tape.leaf(&w, true);
    assert!(tape.backward(wv).is_err());
}

#[test]
fn composite_graph_matches_finite_differences() {
    // A graph touching most op kinds, checked coordinate by coordinate
    // against central differences at 1e-4 relative error.
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let table = Tensor::uniform(vec![5, 3], 0.8, &mut rng);
    let filt = Tensor::uniform(vec![2, 3, 2], 0.8, &mut rng);
    let bias = Tensor::uniform(vec![2], 0.5, &mut rng);
    let gate_w = Tensor::uniform(vec![2, 2], 0.8, &mut rng);
    let key = Tensor::uniform(vec![4], 0.9, &mut rng);
    let mem = Tensor::uniform(vec![3, 4], 0.9, &mut rng);

    let eval = |params: &[Tensor]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p, true)).collect();
        let (tv, fv, bv, gv, kv, mv) = (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5]);
        let looked = tape.lookup_cols(tv, &[1, 2, 4, 0]).unwrap();
        let pre = tape.conv_wide(looked, fv, bv).unwrap();
        let c = tape.tanh(pre);
        let pooled = tape.max_pool_rows(c).unwrap();
        let gated = tape.matvec(gv, pooled).unwrap();
        let act = tape.sigmoid(gated);
        let cos = tape.cosine(act, pooled).unwrap();
        let scores = tape.cosine_rows(mv, kv).unwrap();
        let weights = tape.softmax(scores).unwrap();
        let read = tape.vecmat(weights, mv).unwrap();
        let key_dot = tape.dot(read, kv).unwrap();
        let ce_in = tape.concat(&[key_dot, cos], 0).unwrap();
        let ce = tape.cross_entropy(ce_in, 0).unwrap();
        let both = tape.concat(&[ce, cos], 0).unwrap();
        let total = tape.sum(both);
        let loss = tape.affine(total, 1.3, 0.2);
        tape.backward(loss).unwrap();
        let grads = vars.iter().map(|&v| tape.grad(v).unwrap_or(&[]).to_vec()).collect();
        (tape.value(loss)[0], grads)
    };

    let mut params = vec![table, filt, bias, gate_w, key, mem];
    let (_, analytic) = eval(&params);
    let h = 1e-4;
    for pi in 0..params.len() {
        // Skip the frozen padding row of the lookup table (param 0, row 0).
        let start = if pi == 0 { 3 } else { 0 };
        for c in start..params[pi].numel() {
            let orig = params[pi].data()[c];
            params[pi].data_mut()[c] = orig + h;
            let (plus, _) = eval(&params);
            params[pi].data_mut()[c] = orig - h;
            let (minus, _) = eval(&params);
            params[pi].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[pi][c] - numeric).abs() / numeric.abs().max(1.0);
            assert!(rel < 1e-4, "param {} coord {}: analytic {} numeric {}", pi, c, analytic[pi][c], numeric);
        }
    }
}

#[test]
fn lookup_gathers_rows_as_columns() {
    let mut tape = Tape::new();
    let table = tape
        .constant(vec![3, 2], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0])
        .unwrap();
    let looked = tape.lookup_cols(table, &[2, 1, 0]).unwrap();
    assert_eq!(tape.shape(looked), &[2, 3]);
    assert_eq!(tape.value(looked), &[3.0, 1.0, 0.0, 4.0, 2.0, 0.0]);
}

#[test]
fn lookup_pad_row_gets_no_gradient() {
    let mut tape = Tape::new();
    let table = Tensor::matrix(3, 2, vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
    let tv = tape.leaf(&table, true);
    let looked = tape.lookup_cols(tv, &[0, 1, 0]).unwrap();
    let loss = tape.sum(looked);
    tape.backward(loss).unwrap();
    let g = tape.grad(tv).unwrap();
    assert_eq!(&g[..2], &[0.0, 0.0], "padding row must stay frozen");
    assert_eq!(&g[2..4], &[1.0, 1.0]);
}

#[test]
fn dropout_backward_uses_saved_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tape = Tape::new();
    let x = Tensor::vector(vec![1.0; 64]);
    let xv = tape.leaf(&x, true);
    let dropped = tape.dropout(xv, 0.5, true, &mut rng).unwrap();
    let loss = tape.sum(dropped);
    tape.backward(loss).unwrap();
    let g = tape.grad(xv).unwrap();
    for (gi, yi) in g.iter().zip(tape.value(dropped)) {
        assert_eq!(gi, yi, "gradient equals mask when input is all ones");
    }
}

#[test]
fn cosine_zero_vector_convention() {
    let mut tape = Tape::new();
    let z = Tensor::vector(vec![0.0, 0.0]);
    let zv = tape.leaf(&z, true);
    let b = tape.constant(vec![2], vec![1.0, 2.0]).unwrap();
    let c = tape.cosine(zv, b).unwrap();
    assert_eq!(tape.value(c), &[0.0]);
    let loss = tape.sum(c);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(zv).unwrap(), &[0.0, 0.0]);
}

#[test]
fn determinism_bit_identical_across_runs() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::uniform(vec![4, 4], 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x, true);
        let y = tape.matmul(xv, xv).unwrap();
        let act = tape.tanh(y);
        let s = tape.sum(act);
        tape.backward(s).unwrap();
        let mut bits: Vec<u64> = tape.value(s).iter().map(|v| v.to_bits()).collect();
        bits.extend(tape.grad(xv).unwrap().iter().map(|v| v.to_bits()));
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn scale_by_scales_and_differentiates() {
    let mut tape = Tape::new();
    let x = Tensor::vector(vec![1.0, 2.0]);
    let s = Tensor::scalar(3.0);
    let xv = tape.leaf(&x, true);
    let sv = tape.leaf(&s, true);
    let y = tape.scale_by(xv, sv).unwrap();
    assert_eq!(tape.value(y), &[3.0, 6.0]);
    let loss = tape.sum(y);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(xv).unwrap(), &[3.0, 3.0]);
    assert_eq!(tape.grad(sv).unwrap(), &[3.0]);
}

#[test]
fn clear_resets_the_record() {
    let mut tape = Tape::new();
    let _ = tape.constant(vec![1], vec![1.0]).unwrap();
    assert_eq!(tape.len(), 1);
    tape.clear();
    assert!(tape.is_empty());
}
