//! Central finite-difference gradient checking for every graph op.

use super::graph::{BatchNormMode, Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::seed;

pub const FD_STEP: f64 = 1e-5;

pub type BuildFn = fn(&mut Graph, &[Var]) -> Result<Var>;

/// One op under test: input shapes and the expression built from them.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: BuildFn,
}

fn case(name: &'static str, shapes: &[&[usize]], build: BuildFn) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), build }
}

/// The op catalogue covered by the gradient checks.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", &[&[2, 3, 4], &[3, 1]], |g, v| g.add(v[0], v[1])),
        case("sub", &[&[5], &[5]], |g, v| g.sub(v[0], v[1])),
        case("mul", &[&[3, 4], &[3, 4]], |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast", &[&[2, 3, 2, 2], &[1, 3, 1, 1]], |g, v| g.mul(v[0], v[1])),
        case("mul_self", &[&[6]], |g, v| g.mul(v[0], v[0])),
        case("scale", &[&[4]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("add_scalar", &[&[4]], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        case("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("transpose", &[&[3, 5]], |g, v| g.transpose(v[0])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("relu", &[&[10]], |g, v| Ok(g.relu(v[0]))),
        case("gelu", &[&[10]], |g, v| Ok(g.gelu(v[0]))),
        case("sigmoid", &[&[10]], |g, v| Ok(g.sigmoid(v[0]))),
        case("tanh", &[&[10]], |g, v| Ok(g.tanh(v[0]))),
        case("softmax_last", &[&[3, 5]], |g, v| g.softmax(v[0], 1)),
        case("softmax_first", &[&[3, 5]], |g, v| g.softmax(v[0], 0)),
        case("log_softmax", &[&[2, 3, 4]], |g, v| g.log_softmax(v[0], 1)),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        case("embedding_lookup", &[&[7, 3]], |g, v| g.embedding_lookup(v[0], &[1, 4, 1, 6, 0])),
        case("conv2d_3x3", &[&[2, 2, 5, 4], &[3, 2, 3, 3], &[3]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)),
        case("conv2d_stride2", &[&[1, 2, 5, 6], &[2, 2, 3, 3]], |g, v| g.conv2d(v[0], v[1], None, 2)),
        case("conv2d_1x1", &[&[2, 3, 3, 2], &[2, 3, 1, 1], &[2]], |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1)),
        case("max_pool2d", &[&[2, 2, 4, 6]], |g, v| g.max_pool2d(v[0], (2, 2), (2, 2))),
        case("avg_pool2d", &[&[2, 2, 5, 4]], |g, v| g.avg_pool2d(v[0], (2, 2), (2, 2))),
        case("avg_pool2d_global", &[&[2, 3, 3, 4]], |g, v| g.avg_pool2d(v[0], (3, 4), (3, 4))),
        case("global_mean_max_pool", &[&[2, 3, 5, 4]], |g, v| g.global_mean_max_pool(v[0])),
        case("dropout", &[&[3, 8]], |g, v| {
            let mut rng = seed::rng(77);
            Ok(g.dropout(v[0], 0.3, true, &mut rng))
        }),
        case("concat_rows", &[&[1, 4], &[3, 4]], |g, v| g.concat(&[v[0], v[1]], 0)),
        case("concat_cols", &[&[3, 2], &[3, 4], &[3, 1]], |g, v| g.concat(&[v[0], v[1], v[2]], 1)),
        case("slice", &[&[4, 6]], |g, v| g.slice(v[0], 1, 2, 3)),
        case("batch_norm_train", &[&[3, 2, 2, 3], &[2], &[2]], |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?.0)
        }),
        case("batch_norm_eval", &[&[3, 2, 2, 2], &[2], &[2]], |g, v| {
            let mode = BatchNormMode::Eval { mean: &[0.1, -0.2], var: &[0.8, 1.3] };
            Ok(g.batch_norm(v[0], v[1], v[2], 1e-5, mode)?.0)
        }),
        case("blend", &[&[2, 5], &[2, 5], &[2, 5]], |g, v| g.blend(v[0], v[1], v[2])),
        case("sum", &[&[3, 3]], |g, v| Ok(g.sum(v[0]))),
        case("mean", &[&[3, 3]], |g, v| Ok(g.mean(v[0]))),
        case("cross_entropy", &[&[4, 6]], |g, v| g.cross_entropy(v[0], &[0, 5, 2, 2])),
    ]
}

fn random_inputs(shapes: &[Vec<usize>], trial_seed: u64) -> Vec<Tensor> {
    let mut rng = seed::rng(trial_seed);
    shapes.iter().map(|s| Tensor::uniform(s, 1.5, &mut rng)).collect()
}

/// `sum(f(inputs) * r)` for a fixed random `r`, so every output element
/// contributes to the checked scalar.
fn weighted_loss(case: &OpCase, inputs: &[Tensor], r_seed: u64, g: &mut Graph) -> Result<(Vec<Var>, Var)> {
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(g, &vars)?;
    let shape = g.shape(out).to_vec();
    let r = Tensor::uniform(&shape, 1.0, &mut seed::rng(r_seed));
    let rv = g.constant(r);
    let prod = g.mul(out, rv)?;
    Ok((vars, g.sum(prod)))
}

/// Largest relative error `|a - n| / (|a| + |n|)` (vector norms, per
/// input) between autodiff and central differences for one random draw.
pub fn check(case: &OpCase, trial_seed: u64) -> Result<f64> {
    let inputs = random_inputs(&case.shapes, trial_seed);
    let r_seed = seed::derive_n(trial_seed, 1);
    let mut g = Graph::new();
    let (vars, loss) = weighted_loss(case, &inputs, r_seed, &mut g)?;
    g.backward(loss)?;
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let (_, l) = weighted_loss(case, xs, r_seed, &mut g)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        let mut xs = inputs.clone();
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data[j];
            xs[i].data[j] = x0 + FD_STEP;
            let up = eval(&xs)?;
            xs[i].data[j] = x0 - FD_STEP;
            let down = eval(&xs)?;
            xs[i].data[j] = x0;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let denom = norm(&analytic) + norm(&numeric);
        if denom > 0.0 {
            worst = worst.max(norm(&diff) / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for c in op_cases() {
            for trial in 0..20 {
                let err = check(&c, seed::derive(trial, c.name)).unwrap();
                assert!(err <= 1e-4, "{} trial {trial}: relative error {err:e}", c.name);
            }
        }
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // A forward that the tape cannot see (constant) has zero analytic
        // gradient but non-zero numeric gradient.
        let c = case("hidden", &[&[3]], |g, v| {
            let t = g.value(v[0]).clone();
            let k = g.constant(t);
            g.add(v[0], k)
        });
        assert!(check(&c, 1).unwrap() > 0.1);
    }
}
