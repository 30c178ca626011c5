//! Every differentiable primitive against central finite differences at f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vemfuse_diffmath::gradcheck::{finite_diff_check, GradCheckOptions};
use vemfuse_diffmath::{ParamId, ParamSet, Result, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn positive_dist(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = random(rows, cols, rng).map(|x| x.exp());
    for r in 0..rows {
        let s: f64 = t.row(r).iter().sum();
        t.row_mut(r).iter_mut().for_each(|x| *x /= s);
    }
    t
}

/// Reduces any tensor to a scalar through fixed random weights so that
/// every output coordinate contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.value(v).shape().to_vec();
    let n = tape.value(v).numel();
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = tape.constant(w);
    let m = tape.mul(v, w)?;
    tape.sum(m)
}

fn check<F>(name: &str, params: &mut ParamSet<f64>, mut f: F)
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let ids: Vec<ParamId> = params.ids().collect();
    let report = finite_diff_check(params, &GradCheckOptions::default(), |tape, p| {
        let vars: Vec<Var> = ids.iter().map(|&id| tape.param(p, id)).collect();
        let out = f(tape, &vars)?;
        if tape.value(out).is_scalar() {
            Ok(out)
        } else {
            weighted_sum(tape, out, 99)
        }
    })
    .unwrap();
    assert!(
        report.max_rel_error < TOL,
        "{name}: max rel error {} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

fn set(tensors: Vec<Tensor<f64>>) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    for (i, t) in tensors.into_iter().enumerate() {
        p.add(format!("x{i}"), t).unwrap();
    }
    p
}

#[test]
fn elementwise_and_linear_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = set(vec![random(3, 4, &mut rng), random(3, 4, &mut rng)]);
    check("add", &mut p, |t, v| t.add(v[0], v[1]));
    check("sub", &mut p, |t, v| t.sub(v[0], v[1]));
    check("mul", &mut p, |t, v| t.mul(v[0], v[1]));
    check("scale", &mut p, |t, v| t.scale(v[0], -2.5));
    check("exp", &mut p, |t, v| t.exp(v[0]));
    check("tanh", &mut p, |t, v| t.tanh(v[0]));
    check("sigmoid", &mut p, |t, v| t.sigmoid(v[1]));
    check("relu", &mut p, |t, v| t.relu(v[0]));
    check("sum", &mut p, |t, v| t.sum(v[0]));
    check("mean", &mut p, |t, v| t.mean(v[1]));
    check("circ_corr", &mut p, |t, v| t.circ_corr(v[0], v[1]));
    check("concat_rows", &mut p, |t, v| {
        t.concat_rows(&[v[0], v[1], v[0]])
    });
    check("softmax", &mut p, |t, v| t.softmax(v[0], 0.7));
    check("log_softmax", &mut p, |t, v| t.log_softmax(v[1], 2.0));
}

#[test]
fn matrix_and_index_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = set(vec![
        random(3, 4, &mut rng),
        random(4, 5, &mut rng),
        random(6, 4, &mut rng),
        random(1, 4, &mut rng),
    ]);
    check("matmul", &mut p, |t, v| t.matmul(v[0], v[1]));
    check("matmul_nt", &mut p, |t, v| t.matmul_nt(v[0], v[2]));
    check("add_row", &mut p, |t, v| t.add_row(v[0], v[3]));
    check("gather_rows", &mut p, |t, v| {
        t.gather_rows(v[2], vec![0, 5, 5, 2])
    });
    check("scatter_add_rows", &mut p, |t, v| {
        t.scatter_add_rows(v[2], vec![0, 1, 0, 3, 3, 3], 4)
    });
    check("scale_rows", &mut p, |t, v| {
        t.scale_rows(v[0], vec![0.5, -1.0, 3.0])
    });
}

#[test]
fn distribution_primitives() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut p = set(vec![
        positive_dist(2, 5, &mut rng),
        positive_dist(2, 5, &mut rng),
        random(2, 5, &mut rng),
    ]);
    check("log", &mut p, |t, v| t.log(v[0], 1e-12));
    check("kl_div", &mut p, |t, v| t.kl_div(v[0], v[1], 1e-12));
    check("soft_cross_entropy", &mut p, |t, v| {
        t.soft_cross_entropy(v[0], v[1], 1e-12)
    });
    let targets = Tensor::matrix(
        2,
        5,
        vec![0.9, 0.02, 0.02, 0.9, 0.02, 0.02, 0.02, 0.9, 0.02, 0.02],
    )
    .unwrap();
    check("bce_with_logits", &mut p, move |t, v| {
        t.bce_with_logits(v[2], targets.clone())
    });
}

#[test]
fn random_composite_graphs() {
    // tanh(A·B) ⊙ C summed, then softmax-KL against a fixed target
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut p = set(vec![
            random(4, 3, &mut rng),
            random(3, 6, &mut rng),
            random(4, 6, &mut rng),
        ]);
        let target = positive_dist(4, 6, &mut rng);
        check("composite", &mut p, |t, v| {
            let ab = t.matmul(v[0], v[1])?;
            let h = t.tanh(ab)?;
            let z = t.mul(h, v[2])?;
            let q = t.softmax(z, 1.3)?;
            let tgt = t.constant(target.clone());
            t.kl_div(tgt, q, 1e-12)
        });
    }
}
