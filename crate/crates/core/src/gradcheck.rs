//! Central finite-difference checks of graph gradients.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over all checked leaves.
    pub relative: f64,
    /// Largest elementwise `|a − n|`.
    pub max_abs: f64,
    pub checked: usize,
}

/// Compares reverse-mode gradients of the scalar `output` against central
/// differences with step `eps`.
pub fn check_gradients<S: Scalar>(
    g: &Graph<S>,
    inputs: &HashMap<String, Tensor<S>>,
    output: NodeId,
    leaves: &[&str],
    eps: f64,
) -> Result<GradCheck> {
    let eval = g.evaluate(inputs)?;
    let analytic = g.gradients(&eval, output, leaves)?;
    let value = |bound: &HashMap<String, Tensor<S>>| -> Result<f64> {
        Ok(g.evaluate(bound)?.value(output).data()[0].as_f64())
    };
    let mut bound = inputs.clone();
    let (mut diff2, mut a2, mut n2, mut max_abs, mut checked) = (0.0, 0.0, 0.0, 0.0f64, 0);
    for &name in leaves {
        let base = inputs[name].clone();
        for i in 0..base.len() {
            let x = base.data()[i];
            let mut probe = base.clone();
            probe.data_mut()[i] = x + S::of(eps);
            bound.insert(name.to_string(), probe.clone());
            let up = value(&bound)?;
            probe.data_mut()[i] = x - S::of(eps);
            bound.insert(name.to_string(), probe);
            let dn = value(&bound)?;
            let num = (up - dn) / (2.0 * eps);
            let a = analytic[name].data()[i].as_f64();
            diff2 += (a - num) * (a - num);
            a2 += a * a;
            n2 += num * num;
            max_abs = max_abs.max((a - num).abs());
            checked += 1;
        }
        bound.insert(name.to_string(), base);
    }
    let scale = a2.max(n2).sqrt();
    let relative = if scale == 0.0 { 0.0 } else { diff2.sqrt() / scale };
    Ok(GradCheck {
        relative,
        max_abs,
        checked,
    })
}

/// One differentiable op wired into a scalar objective `Σ w ⊙ op(...)`.
pub struct OpCase {
    pub name: &'static str,
    pub graph: Graph<f64>,
    pub inputs: HashMap<String, Tensor<f64>>,
    pub output: NodeId,
    pub leaves: Vec<&'static str>,
}

/// A gradient case for every differentiable op except `round_ste`, whose
/// gradient is the identity by definition.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    use rand::Rng;
    let mut rng = crate::weights::tensor_rng(seed, "gradcheck");
    let mut rand_t = |shape: &[usize], lo: f64, hi: f64| -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    };
    type Build = fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;
    // (name, leaf shapes with value ranges, builder)
    let specs: Vec<(&'static str, Vec<(Vec<usize>, f64, f64)>, Build)> = vec![
        ("matmul", vec![(vec![2, 3], -1.0, 1.0), (vec![3, 4], -1.0, 1.0)], |g, x| g.matmul(x[0], x[1])),
        ("add", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |g, x| g.add(x[0], x[1])),
        ("sub", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |g, x| g.sub(x[0], x[1])),
        ("mul", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], -1.0, 1.0)], |g, x| g.mul(x[0], x[1])),
        ("div", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 3], 0.5, 2.0)], |g, x| g.div(x[0], x[1])),
        ("add_row_bias", vec![(vec![3, 4], -1.0, 1.0), (vec![4], -1.0, 1.0)], |g, x| g.add_row_bias(x[0], x[1])),
        ("add_scalar", vec![(vec![5], -1.0, 1.0)], |g, x| Ok(g.add_scalar(x[0], 0.7))),
        ("mul_scalar", vec![(vec![5], -1.0, 1.0)], |g, x| Ok(g.mul_scalar(x[0], -1.3))),
        ("transpose", vec![(vec![2, 3], -1.0, 1.0)], |g, x| g.transpose(x[0])),
        ("reshape", vec![(vec![2, 3], -1.0, 1.0)], |g, x| g.reshape(x[0], vec![3, 2])),
        ("gather", vec![(vec![4], -1.0, 1.0)], |g, x| g.gather(x[0], vec![3, 0, 0, 2, 1, 3], vec![2, 3])),
        ("scatter_add", vec![(vec![6], -1.0, 1.0)], |g, x| g.scatter_add(x[0], vec![1, 0, 1, 3, 3, 3], vec![4])),
        ("concat", vec![(vec![2, 3], -1.0, 1.0), (vec![2, 2], -1.0, 1.0)], |g, x| g.concat(x[0], x[1])),
        ("softmax", vec![(vec![2, 4], -2.0, 2.0)], |g, x| Ok(g.softmax(x[0]))),
        ("masked_softmax", vec![(vec![2, 3, 4], -2.0, 2.0)], |g, x| {
            let inf = f64::NEG_INFINITY;
            let m = Tensor::new(vec![3, 4], vec![0.0, inf, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, inf, inf, 0.0, inf])?;
            let m = g.constant(m);
            g.masked_softmax(x[0], m)
        }),
        ("gelu", vec![(vec![6], -3.0, 3.0)], |g, x| Ok(g.gelu(x[0]))),
        ("layer_norm", vec![(vec![3, 5], -2.0, 2.0), (vec![5], 0.5, 1.5), (vec![5], -0.5, 0.5)], |g, x| {
            g.layer_norm(x[0], x[1], x[2])
        }),
        ("exp", vec![(vec![5], -2.0, 2.0)], |g, x| Ok(g.exp(x[0]))),
        ("softplus", vec![(vec![5], -3.0, 3.0)], |g, x| Ok(g.softplus(x[0]))),
        ("ln", vec![(vec![5], 0.3, 3.0)], |g, x| Ok(g.ln(x[0]))),
        ("normal_cdf", vec![(vec![5], -3.0, 3.0)], |g, x| Ok(g.normal_cdf(x[0]))),
        ("clamp_min", vec![(vec![6], 0.2, 1.0)], |g, x| {
            let s = g.add_scalar(x[0], -0.6);
            Ok(g.clamp_min(s, 0.0))
        }),
        ("sum", vec![(vec![2, 3], -1.0, 1.0)], |g, x| Ok(g.sum(x[0]))),
        ("mean", vec![(vec![2, 3], -1.0, 1.0)], |g, x| Ok(g.mean(x[0]))),
        ("sum_last_axis", vec![(vec![2, 3], -1.0, 1.0)], |g, x| g.sum_last_axis(x[0])),
        ("linear", vec![(vec![2, 3], -1.0, 1.0), (vec![3, 4], -1.0, 1.0), (vec![4], -1.0, 1.0)], |g, x| {
            g.linear(x[0], x[1], x[2])
        }),
    ];
    const NAMES: [&str; 3] = ["a", "b", "c"];
    let mut cases = Vec::with_capacity(specs.len());
    for (name, leaves, build) in specs {
        let mut g = Graph::new();
        let mut inputs = HashMap::new();
        let mut ids = Vec::new();
        for (i, (shape, lo, hi)) in leaves.iter().enumerate() {
            ids.push(g.leaf(NAMES[i], shape.clone()));
            let mut t = rand_t(shape, *lo, *hi);
            if name == "clamp_min" {
                // keep probes away from the kink
                t.data_mut().iter_mut().for_each(|v| {
                    if (*v - 0.6).abs() < 0.05 {
                        *v += 0.1;
                    }
                });
            }
            inputs.insert(NAMES[i].to_string(), t);
        }
        let y = build(&mut g, &ids).expect("valid op case");
        let w = rand_t(g.shape(y), -1.0, 1.0);
        let w = g.constant(w);
        let yw = g.mul(y, w).expect("same shape");
        let out = g.sum(yw);
        cases.push(OpCase {
            name,
            graph: g,
            inputs,
            output: out,
            leaves: NAMES[..leaves.len()].to_vec(),
        });
    }
    cases
}
