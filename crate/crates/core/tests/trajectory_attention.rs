//! Trajectory attention against direct-summation oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tats::attention::{attention_heatmap, SpaceTimeLayout, TrajectoryAttention};
use tats::gradcheck::{check_params, finite_difference_check, worst};
use tats::{DiffTensor, ParamStore, Tape};

type Mat = Vec<Vec<f64>>;

fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect()
}

fn flat(m: &Mat) -> Vec<f64> {
    m.concat()
}

fn matvec_rows(x: &Mat, w: &Mat) -> Mat {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| row.iter().zip(w).map(|(a, wr)| a * wr[j]).sum())
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|x| x / z).collect()
}

/// ỹ[n][t'] (full width), by direct summation per head.
fn oracle_stage1(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    s: usize,
    t: usize,
    heads: usize,
    scale: f64,
) -> Vec<Mat> {
    let d = q[0].len();
    let dh = d / heads;
    let n = s * t;
    (0..n)
        .map(|st| {
            (0..t)
                .map(|tp| {
                    let mut out = vec![0.0; d];
                    for h in 0..heads {
                        let cols = h * dh..(h + 1) * dh;
                        let logits: Vec<f64> = (0..s)
                            .map(|sp| {
                                let key = &k[tp * s + sp];
                                cols.clone().map(|c| q[st][c] * key[c]).sum::<f64>() * scale
                            })
                            .collect();
                        let w = softmax(&logits);
                        for sp in 0..s {
                            for c in cols.clone() {
                                out[c] += w[sp] * v[tp * s + sp][c];
                            }
                        }
                    }
                    out
                })
                .collect()
        })
        .collect()
}

/// y[n] from trajectories by direct summation per head.
fn oracle_stage2(
    traj: &[Mat],
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    s: usize,
    heads: usize,
    scale: f64,
) -> Mat {
    let t = traj[0].len();
    let d = wq.len();
    let dh = d / heads;
    (0..traj.len())
        .map(|st| {
            let tt = st / s;
            let qt = &matvec_rows(&vec![traj[st][tt].clone()], wq)[0];
            let kt = matvec_rows(&traj[st], wk);
            let vt = matvec_rows(&traj[st], wv);
            let mut out = vec![0.0; d];
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let logits: Vec<f64> = (0..t)
                    .map(|tp| cols.clone().map(|c| qt[c] * kt[tp][c]).sum::<f64>() * scale)
                    .collect();
                let w = softmax(&logits);
                for tp in 0..t {
                    for c in cols.clone() {
                        out[c] += w[tp] * vt[tp][c];
                    }
                }
            }
            out
        })
        .collect()
}

fn ta(d: usize, heads: usize) -> TrajectoryAttention {
    TrajectoryAttention::new("ta", d, heads).unwrap()
}

fn store_for(att: &TrajectoryAttention, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    att.init_params(&mut store, &mut rng).unwrap();
    // larger weights than the training init so attention is far from uniform
    for w in TrajectoryAttention::WEIGHTS {
        let p = store.get_mut(&att.name(w)).unwrap();
        p.values
            .iter_mut()
            .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let b = store.get_mut(&att.name("bo")).unwrap();
    b.values
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-0.5..0.5));
    store
}

fn param_mat(store: &ParamStore, name: &str) -> Mat {
    let p = store.get(name).unwrap();
    p.values.chunks(p.shape[1]).map(<[f64]>::to_vec).collect()
}

fn stage1(
    att: &TrajectoryAttention,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    layout: SpaceTimeLayout,
) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let n = layout.tokens();
    let d = att.dim;
    let qv = tape.constant(&[n, d], flat(q)).unwrap();
    let kv = tape.constant(&[n, d], flat(k)).unwrap();
    let vv = tape.constant(&[n, d], flat(v)).unwrap();
    let (y, w) = att
        .trajectory_tokens(&mut tape, qv, kv, vv, layout)
        .unwrap();
    (tape.value(y).values.clone(), tape.value(w).values.clone())
}

fn hand_toy() -> (Mat, Mat, Mat) {
    let q = vec![
        vec![1.0, 0.5],
        vec![-0.3, 2.0],
        vec![0.7, -1.1],
        vec![0.0, 0.4],
    ];
    let k = vec![
        vec![0.2, -0.6],
        vec![1.5, 0.3],
        vec![-0.8, 0.9],
        vec![0.6, 0.6],
    ];
    let v = vec![
        vec![3.0, -1.0],
        vec![0.5, 2.5],
        vec![-2.0, 1.0],
        vec![1.0, 0.0],
    ];
    (q, k, v)
}

#[test]
fn stage1_matches_direct_summation() {
    let (q, k, v) = hand_toy();
    let layout = SpaceTimeLayout::new(2, 2).unwrap();
    for scaled in [true, false] {
        let mut att = ta(2, 1);
        att.scaled = scaled;
        let scale = if scaled { 1.0 / 2f64.sqrt() } else { 1.0 };
        let (got, _) = stage1(&att, &q, &k, &v, layout);
        let want = oracle_stage1(&q, &k, &v, 2, 2, 1, scale);
        let want: Vec<f64> = want.iter().flat_map(|r| r.concat()).collect();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn stage1_single_location_copies_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let layout = SpaceTimeLayout::new(1, 3).unwrap();
    let (q, k, v) = (
        rand_mat(3, 4, &mut rng),
        rand_mat(3, 4, &mut rng),
        rand_mat(3, 4, &mut rng),
    );
    let (got, _) = stage1(&ta(4, 2), &q, &k, &v, layout);
    for st in 0..3 {
        for tp in 0..3 {
            assert_eq!(
                &got[(st * 3 + tp) * 4..(st * 3 + tp + 1) * 4],
                v[tp].as_slice()
            );
        }
    }
}

#[test]
fn stage1_orthogonal_queries_average_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let layout = SpaceTimeLayout::new(3, 2).unwrap();
    let q = vec![vec![0.0; 4]; 6];
    let (k, v) = (rand_mat(6, 4, &mut rng), rand_mat(6, 4, &mut rng));
    let (got, _) = stage1(&ta(4, 2), &q, &k, &v, layout);
    for st in 0..6 {
        for tp in 0..2 {
            for c in 0..4 {
                let mean = (0..3).map(|s| v[tp * 3 + s][c]).sum::<f64>() / 3.0;
                assert!((got[(st * 2 + tp) * 4 + c] - mean).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn stage2_matches_direct_summation() {
    let (q, k, v) = hand_toy();
    let layout = SpaceTimeLayout::new(2, 2).unwrap();
    let att = ta(2, 1);
    let store = store_for(&att, 21);
    let traj = oracle_stage1(&q, &k, &v, 2, 2, 1, 1.0 / 2f64.sqrt());
    let mut tape = Tape::new();
    let tv = tape
        .constant(&[8, 2], traj.iter().flat_map(|r| r.concat()).collect())
        .unwrap();
    let (y, w) = att.temporal_pool(&mut tape, &store, tv, layout).unwrap();
    let want = oracle_stage2(
        &traj,
        &param_mat(&store, "ta.wq2"),
        &param_mat(&store, "ta.wk2"),
        &param_mat(&store, "ta.wv2"),
        2,
        1,
        1.0 / 2f64.sqrt(),
    );
    for (a, b) in tape.value(y).values.iter().zip(flat(&want).iter()) {
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
    for row in tape.value(w).values.chunks(2) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn stage2_single_frame_returns_projected_value() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = SpaceTimeLayout::new(3, 1).unwrap();
    let att = ta(4, 2);
    let store = store_for(&att, 4);
    let traj = rand_mat(3, 4, &mut rng);
    let mut tape = Tape::new();
    let tv = tape.constant(&[3, 4], flat(&traj)).unwrap();
    let (y, _) = att.temporal_pool(&mut tape, &store, tv, layout).unwrap();
    let want = matvec_rows(&traj, &param_mat(&store, "ta.wv2"));
    for (a, b) in tape.value(y).values.iter().zip(flat(&want).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn stage2_identical_trajectory_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layout = SpaceTimeLayout::new(2, 3).unwrap();
    let att = ta(4, 2);
    let store = store_for(&att, 6);
    let per_token = rand_mat(6, 4, &mut rng);
    let traj: Vec<f64> = per_token.iter().flat_map(|r| r.repeat(3)).collect();
    let mut tape = Tape::new();
    let tv = tape.constant(&[18, 4], traj).unwrap();
    let (y, _) = att.temporal_pool(&mut tape, &store, tv, layout).unwrap();
    let want = matvec_rows(&per_token, &param_mat(&store, "ta.wv2"));
    for (a, b) in tape.value(y).values.iter().zip(flat(&want).iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_output_projection_is_identity() {
    let att = ta(4, 2);
    let mut store = store_for(&att, 7);
    store.get_mut("ta.wo").unwrap().values.fill(0.0);
    store.get_mut("ta.bo").unwrap().values.fill(0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_mat(6, 4, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(&[6, 4], flat(&x)).unwrap();
    let tr = att
        .block(&mut tape, &store, xv, SpaceTimeLayout::new(3, 2).unwrap())
        .unwrap();
    assert_eq!(tape.value(tr.z).values, flat(&x));
}

#[test]
fn block_matches_composed_oracle_seed_11() {
    let att = ta(4, 2);
    let store = store_for(&att, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_mat(4, 4, &mut rng);
    let layout = SpaceTimeLayout::new(2, 2).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(&[4, 4], flat(&x)).unwrap();
    let tr = att.block(&mut tape, &store, xv, layout).unwrap();

    let scale = 0.5f64.sqrt();
    let q = matvec_rows(&x, &param_mat(&store, "ta.wq"));
    let k = matvec_rows(&x, &param_mat(&store, "ta.wk"));
    let v = matvec_rows(&x, &param_mat(&store, "ta.wv"));
    let traj = oracle_stage1(&q, &k, &v, 2, 2, 2, scale);
    let y = oracle_stage2(
        &traj,
        &param_mat(&store, "ta.wq2"),
        &param_mat(&store, "ta.wk2"),
        &param_mat(&store, "ta.wv2"),
        2,
        2,
        scale,
    );
    let out = matvec_rows(&y, &param_mat(&store, "ta.wo"));
    let bo = &store.get("ta.bo").unwrap().values;
    for n in 0..4 {
        for c in 0..4 {
            let want = x[n][c] + out[n][c] + bo[c];
            let got = tape.value(tr.z).values[n * 4 + c];
            assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn block_gradients_pass_finite_differences() {
    let att = ta(4, 2);
    let store = store_for(&att, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_mat(6, 4, &mut rng);
    let layout = SpaceTimeLayout::new(3, 2).unwrap();
    let loss = |tape: &mut Tape, store: &ParamStore| {
        let xv = tape.constant(&[6, 4], flat(&x))?;
        let tr = att.block(tape, store, xv, layout)?;
        let sq = tape.square(tr.z)?;
        tape.mean_all(sq)
    };
    let report = check_params(&store, loss, 1e-5, |_| true).unwrap();
    assert_eq!(report.len(), 8);
    assert!(worst(&report) <= 1e-4, "{report:?}");

    let xt = DiffTensor::new(vec![6, 4], flat(&x)).unwrap();
    let err = finite_difference_check(
        |tape, xv| {
            let tr = att.block(tape, &store, xv, layout)?;
            let sq = tape.square(tr.z)?;
            tape.mean_all(sq)
        },
        &xt,
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-4, "{err}");
}

#[test]
fn attention_rows_sum_to_one() {
    let att = ta(8, 2);
    let store = store_for(&att, 14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let layout = SpaceTimeLayout::new(4, 3).unwrap();
    let mut tape = Tape::new();
    let xv = tape
        .constant(&[12, 8], flat(&rand_mat(12, 8, &mut rng)))
        .unwrap();
    let tr = att.block(&mut tape, &store, xv, layout).unwrap();
    for row in tape.value(tr.spatial_weights).values.chunks(4) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    for row in tape.value(tr.temporal_weights).values.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn within_frame_permutation_equivariance() {
    let att = ta(8, 2);
    let store = store_for(&att, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let layout = SpaceTimeLayout::new(4, 3).unwrap();
    let x = rand_mat(12, 8, &mut rng);
    // a different shuffle of locations in every frame
    let perms = [[2, 0, 3, 1], [1, 3, 0, 2], [3, 2, 1, 0]];
    let order: Vec<usize> = (0..12)
        .map(|n| {
            let (s, t) = layout.locate(n);
            layout.index(perms[t][s], t)
        })
        .collect();
    let run = |x: &Mat| {
        let mut tape = Tape::new();
        let xv = tape.constant(&[12, 8], flat(x)).unwrap();
        let tr = att.block(&mut tape, &store, xv, layout).unwrap();
        (
            tape.value(tr.z).values.clone(),
            tape.value(tr.pooled).values.clone(),
        )
    };
    let (z, y) = run(&x);
    let xp: Mat = order.iter().map(|&i| x[i].clone()).collect();
    let (zp, yp) = run(&xp);
    for (row, &src) in order.iter().enumerate() {
        for c in 0..8 {
            assert!((zp[row * 8 + c] - z[src * 8 + c]).abs() < 1e-12);
            assert!((yp[row * 8 + c] - y[src * 8 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_frame_reduces_to_spatial_attention() {
    let att = ta(4, 1);
    let store = store_for(&att, 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let x = rand_mat(5, 4, &mut rng);
    let layout = SpaceTimeLayout::new(5, 1).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(&[5, 4], flat(&x)).unwrap();
    let tr = att.block(&mut tape, &store, xv, layout).unwrap();

    let q = matvec_rows(&x, &param_mat(&store, "ta.wq"));
    let k = matvec_rows(&x, &param_mat(&store, "ta.wk"));
    let v = matvec_rows(&x, &param_mat(&store, "ta.wv"));
    let attn: Mat = (0..5)
        .map(|i| {
            let w = softmax(
                &(0..5)
                    .map(|j| (0..4).map(|c| q[i][c] * k[j][c]).sum::<f64>() * 0.5)
                    .collect::<Vec<_>>(),
            );
            (0..4)
                .map(|c| (0..5).map(|j| w[j] * v[j][c]).sum())
                .collect()
        })
        .collect();
    let y = matvec_rows(
        &matvec_rows(&attn, &param_mat(&store, "ta.wv2")),
        &param_mat(&store, "ta.wo"),
    );
    let bo = &store.get("ta.bo").unwrap().values;
    for n in 0..5 {
        for c in 0..4 {
            let want = x[n][c] + y[n][c] + bo[c];
            assert!((tape.value(tr.z).values[n * 4 + c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn heatmap_uniform_and_hand_summed() {
    let layout = SpaceTimeLayout::new(2, 2).unwrap();
    // uniform attention: every weight 1/S
    let uniform = vec![0.5; 2 * 4 * 2 * 2];
    let sal = attention_heatmap(&uniform, 2, layout).unwrap();
    assert_eq!(sal.len(), 4);
    assert!(sal.iter().all(|&v| (v - 1.0).abs() < 1e-15));

    // one head, hand-picked weights [st][t'][s']
    let w = [
        [[0.9, 0.1], [0.3, 0.7]],
        [[0.2, 0.8], [0.5, 0.5]],
        [[0.6, 0.4], [1.0, 0.0]],
        [[0.0, 1.0], [0.25, 0.75]],
    ];
    let flat: Vec<f64> = w.iter().flat_map(|a| a.iter().flatten().copied()).collect();
    let sal = attention_heatmap(&flat, 1, layout).unwrap();
    // token (s', t') receives sum over st of w[st][t'][s'], divided by S
    for tp in 0..2 {
        for sp in 0..2 {
            let want: f64 = (0..4).map(|st| w[st][tp][sp]).sum::<f64>() / 2.0;
            assert!((sal[layout.index(sp, tp)] - want).abs() < 1e-15);
            assert!((0.0..=2.0).contains(&sal[layout.index(sp, tp)]));
        }
    }
}

#[test]
fn layout_mismatch_is_rejected() {
    let att = ta(4, 2);
    let store = store_for(&att, 20);
    let mut tape = Tape::new();
    let xv = tape.constant(&[5, 4], vec![0.0; 20]).unwrap();
    assert!(att
        .block(&mut tape, &store, xv, SpaceTimeLayout::new(2, 2).unwrap())
        .is_err());
}
