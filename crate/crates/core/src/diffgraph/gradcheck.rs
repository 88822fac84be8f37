//! Central finite-difference gradient checks.
//!
//! The finite-difference side only evaluates forward values, so it is
//! independent of every backward rule it audits. Non-scalar outputs are
//! reduced to a scalar with a fixed random projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphError, ParameterStore, Tape, Tensor, Var};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]; below it the error is absolute.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub probes: usize,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

fn scalarize(tape: &mut Tape, out: Var, seed: u64) -> Result<Var, GraphError> {
    if tape.value(out).len() == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f9a_0e00);
    let w = random_tensor(tape.shape(out), -1.0, 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    Ok(tape.sum_all(p))
}

/// Checks d(output)/d(inputs) for a function built on a tape.
pub fn check_inputs<F>(name: &str, inputs: &[Tensor], build: F, probes: usize, seed: u64) -> Result<GradcheckReport, GraphError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, GraphError>,
{
    let eval = |xs: &[Tensor], recording: bool| -> Result<(Tape, Var, Vec<Var>), GraphError> {
        let mut tape = if recording { Tape::new() } else { Tape::inference() };
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = scalarize(&mut tape, out, seed)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(inputs, true)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.get(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();
    let total: usize = inputs.iter().map(Tensor::len).sum();
    if total == 0 {
        return Err(GraphError::Contract(format!("gradcheck `{name}`: no inputs")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= xs[which].len() {
            flat -= xs[which].len();
            which += 1;
        }
        let orig = xs[which].data()[flat];
        xs[which].data_mut()[flat] = orig + FD_STEP;
        let (t, l, _) = eval(&xs, false)?;
        let plus = t.value(l).item();
        xs[which].data_mut()[flat] = orig - FD_STEP;
        let (t, l, _) = eval(&xs, false)?;
        let minus = t.value(l).item();
        xs[which].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic[which].data()[flat], numeric));
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        probes,
    })
}

/// Checks d(loss)/d(parameters) for a loss built from `store`.
pub fn check_params<F>(name: &str, store: &ParameterStore, build: F, probes: usize, seed: u64) -> Result<GradcheckReport, GraphError>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var, GraphError>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let loss = scalarize(&mut tape, out, seed)?;
    let grads = tape.backward(loss)?;
    let pgrads = tape.param_grads(&grads);
    let candidates: Vec<(String, usize)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(n, p)| (n.to_string(), p.value.len()))
        .collect();
    let total: usize = candidates.iter().map(|c| c.1).sum();
    if total == 0 {
        return Err(GraphError::Contract(format!("gradcheck `{name}`: no trainable parameters")));
    }
    let eval = |s: &ParameterStore| -> Result<f64, GraphError> {
        let mut t = Tape::inference();
        let out = build(&mut t, s)?;
        let l = scalarize(&mut t, out, seed)?;
        Ok(t.value(l).item())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perturbed = store.clone();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= candidates[which].1 {
            flat -= candidates[which].1;
            which += 1;
        }
        let pname = &candidates[which].0;
        let analytic = pgrads.get(pname).map(|g| g.data()[flat]).unwrap_or(0.0);
        let orig = store.value(pname)?.data()[flat];
        let set = |s: &mut ParameterStore, x: f64| s.get_mut(pname).unwrap().value.data_mut()[flat] = x;
        set(&mut perturbed, orig + FD_STEP);
        let plus = eval(&perturbed)?;
        set(&mut perturbed, orig - FD_STEP);
        let minus = eval(&perturbed)?;
        set(&mut perturbed, orig);
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        worst = worst.max(relative_error(analytic, numeric));
    }
    Ok(GradcheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        probes,
    })
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var, GraphError>>;

/// One randomized check per differentiable op.
pub fn check_all_ops(probes: usize, seed: u64) -> Result<Vec<GradcheckReport>, GraphError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(shape, -1.0, 1.0, &mut rng);
    let positive = random_tensor(&[3, 4], 0.5, 2.0, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    let cases: Vec<(&str, Vec<Tensor>, Builder)> = vec![
        ("linear", vec![r(&[4, 3]), r(&[3, 5]), r(&[5])], Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])))),
        ("add", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[3, 4]), r(&[3, 4])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![r(&[3, 4]), positive.clone()], Box::new(|t, v| t.div(v[0], v[1]))),
        ("scale", vec![r(&[3, 4])], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("reshape", vec![r(&[3, 4])], Box::new(|t, v| t.reshape(v[0], &[2, 6]))),
        ("concat", vec![r(&[2, 3]), r(&[2, 5])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("concat_channels", vec![r(&[2, 1, 8]), r(&[2, 2, 8])], Box::new(|t, v| t.concat(&[v[0], v[1]], 1))),
        ("slice", vec![r(&[3, 6])], Box::new(|t, v| t.slice(v[0], 1, 2, 3))),
        ("sqrt", vec![positive], Box::new(|t, v| Ok(t.sqrt(v[0])))),
        ("sigmoid", vec![r(&[3, 4])], Box::new(|t, v| Ok(t.sigmoid(v[0])))),
        ("silu", vec![r(&[3, 4])], Box::new(|t, v| Ok(t.silu(v[0])))),
        ("sum", vec![r(&[2, 3, 4])], Box::new(|t, v| t.sum(v[0], 1))),
        ("sum_all", vec![r(&[2, 3])], Box::new(|t, v| Ok(t.sum_all(v[0])))),
        ("mean", vec![r(&[2, 3])], Box::new(|t, v| t.mean(v[0]))),
        ("gather", vec![r(&[4, 3])], Box::new(|t, v| t.gather(v[0], &[0, 2, 2, 3, 1, 0]))),
        ("scatter_sum", vec![r(&[6, 3])], Box::new(|t, v| t.scatter_sum(v[0], &[0, 2, 2, 3, 1, 0], 4))),
        ("mse", vec![r(&[4, 3]), r(&[4, 3])], Box::new(|t, v| t.mse(v[0], v[1]))),
        ("mv_linear", vec![r(&[3, 2, 8]), r(&[4, 3, 2])], Box::new(|t, v| t.mv_linear(v[0], v[1]))),
        ("geometric_product", vec![r(&[3, 2, 8]), r(&[3, 2, 8])], Box::new(|t, v| t.geometric_product(v[0], v[1]))),
        ("mv_inner", vec![r(&[3, 2, 8]), r(&[3, 2, 8])], Box::new(|t, v| t.mv_inner(v[0], v[1]))),
        ("mv_grade_sq", vec![r(&[3, 2, 8])], Box::new(|t, v| t.mv_grade_sq(v[0]))),
        ("channel_scale", vec![r(&[3, 2, 8]), r(&[3, 2])], Box::new(|t, v| t.channel_scale(v[0], v[1]))),
        ("row_scale", vec![r(&[3, 2, 8])], Box::new(|t, v| t.row_scale(v[0], &[0.5, -2.0, 0.0]))),
        ("select_last", vec![r(&[3, 2, 8])], Box::new(|t, v| t.select_last(v[0], &[1, 2, 3]))),
        ("scatter_last", vec![r(&[3, 2, 3])], Box::new(|t, v| t.scatter_last(v[0], &[1, 2, 3], 8))),
    ];
    cases
        .into_iter()
        .enumerate()
        .map(|(i, (name, inputs, build))| check_inputs(name, &inputs, build, probes, seed.wrapping_add(i as u64)))
        .collect()
}
