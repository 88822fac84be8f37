//! Equivariant building blocks recorded on a [`Tape`].
//!
//! Multivector arrays are tensors of shape `(rows, channels, 8)`. Every
//! layer owns parameter names under a prefix; `init` inserts them into a
//! [`ParameterStore`] and `forward` reads them back from the store.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::clifford::{OrthogonalMap, BLADES};
use crate::diffgraph::{GraphError, ParameterStore, Tape, Tensor, Var};

/// Added to 𝔟(k, k) before the square root in the rejection nonlinearity.
pub const MVN_EPS: f64 = 1e-8;

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

/// Applies the O(3) action to every multivector of a `(.., 8)` tensor.
pub fn transform_mv(t: &Tensor, r: &OrthogonalMap) -> Tensor {
    assert_eq!(t.shape().last(), Some(&BLADES), "transform_mv: last extent must be 8");
    let rho = r.outermorphism();
    let mut out = t.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(BLADES).zip(t.data().chunks_exact(BLADES)) {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = (0..BLADES).map(|j| rho[i][j] * src[j]).sum();
        }
    }
    out
}

fn check_mv(tape: &Tape, op: &'static str, v: Var, channels: usize) -> Result<usize, GraphError> {
    let s = tape.shape(v);
    if s.len() != 3 || s[2] != BLADES || s[1] != channels {
        return Err(GraphError::Shape {
            op,
            detail: format!("expected (M, {channels}, 8), got {s:?}"),
        });
    }
    Ok(s[0])
}

/// Affine map `x @ w + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self {
            name: name.into(),
            fan_in,
            fan_out,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        let bound = (1.0 / self.fan_in as f64).sqrt();
        store.insert(format!("{}.w", self.name), uniform(&[self.fan_in, self.fan_out], bound, rng), true)?;
        store.insert(format!("{}.b", self.name), uniform(&[self.fan_out], bound, rng), true)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, GraphError> {
        let w = tape.param(store, &format!("{}.w", self.name))?;
        let b = tape.param(store, &format!("{}.b", self.name))?;
        tape.linear(x, w, Some(b))
    }
}

/// Two SiLU hidden layers and a linear output.
#[derive(Clone, Debug)]
pub struct ScalarMlp {
    layers: [Linear; 3],
}

impl ScalarMlp {
    pub fn new(name: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            layers: [
                Linear::new(format!("{name}.0"), input, hidden),
                Linear::new(format!("{name}.1"), hidden, hidden),
                Linear::new(format!("{name}.2"), hidden, output),
            ],
        }
    }

    pub fn output_width(&self) -> usize {
        self.layers[2].fan_out
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        self.layers.iter().try_for_each(|l| l.init(store, rng))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var, GraphError> {
        let mut y = x;
        for (i, l) in self.layers.iter().enumerate() {
            y = l.forward(tape, store, y)?;
            if i < 2 {
                y = tape.silu(y);
            }
        }
        Ok(y)
    }
}

/// Grade-wise channel mixing with weights `(4, c_out, c_in)` and no bias.
#[derive(Clone, Debug)]
pub struct MvLinear {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
}

impl MvLinear {
    pub fn new(name: impl Into<String>, c_in: usize, c_out: usize) -> Self {
        Self {
            name: name.into(),
            c_in,
            c_out,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        let bound = (1.0 / self.c_in as f64).sqrt();
        store.insert(self.weight_name(), uniform(&[4, self.c_out, self.c_in], bound, rng), true)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, v: Var) -> Result<Var, GraphError> {
        let w = tape.param(store, &self.weight_name())?;
        tape.mv_linear(v, w)
    }
}

/// Per channel: `q` when 𝔟(q, k) >= 0, otherwise the rejection of `q` from `k`.
#[derive(Clone, Debug)]
pub struct MvnNonlinearity {
    pub q: MvLinear,
    pub k: MvLinear,
}

impl MvnNonlinearity {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            q: MvLinear::new(format!("{name}.q"), channels, channels),
            k: MvLinear::new(format!("{name}.k"), channels, channels),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        self.q.init(store, rng)?;
        self.k.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, v: Var) -> Result<Var, GraphError> {
        let q = self.q.forward(tape, store, v)?;
        let k = self.k.forward(tape, store, v)?;
        mvn_rejection(tape, q, k)
    }
}

/// The branch nonlinearity on precomputed `q` and `k`.
pub fn mvn_rejection(tape: &mut Tape, q: Var, k: Var) -> Result<Var, GraphError> {
    let qk = tape.mv_inner(q, k)?;
    let kk = tape.mv_inner(k, k)?;
    let shape = tape.shape(qk).to_vec();
    let mask: Vec<f64> = tape.value(qk).data().iter().map(|&b| if b < 0.0 { 1.0 } else { 0.0 }).collect();
    let mask = tape.constant(Tensor::new(shape.clone(), mask)?);
    let eps = tape.constant(Tensor::full(&shape, MVN_EPS));
    let den = tape.add(kk, eps)?;
    let coef = tape.div(qk, den)?;
    let coef = tape.mul(coef, mask)?;
    let proj = tape.channel_scale(k, coef)?;
    tape.sub(q, proj)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PsiComposition {
    /// `out(GP(a(v), b(v))) + res(v)`.
    #[default]
    Residual,
    /// `out(GP(a(v), b(v)))`.
    ProductOnly,
}

/// ψ: channel-wise geometric product of two linear images, mixed by an
/// output map, plus an optional linear residual.
#[derive(Clone, Debug)]
pub struct GeometricProductLayer {
    pub a: MvLinear,
    pub b: MvLinear,
    pub out: MvLinear,
    pub res: Option<MvLinear>,
}

impl GeometricProductLayer {
    pub fn new(name: &str, channels: usize, composition: PsiComposition) -> Self {
        let lin = |part: &str| MvLinear::new(format!("{name}.{part}"), channels, channels);
        Self {
            a: lin("a"),
            b: lin("b"),
            out: lin("out"),
            res: (composition == PsiComposition::Residual).then(|| lin("res")),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        for l in [&self.a, &self.b, &self.out].into_iter().chain(&self.res) {
            l.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, v: Var) -> Result<Var, GraphError> {
        let a = self.a.forward(tape, store, v)?;
        let b = self.b.forward(tape, store, v)?;
        let p = tape.geometric_product(a, b)?;
        let y = self.out.forward(tape, store, p)?;
        match &self.res {
            Some(res) => {
                let r = res.forward(tape, store, v)?;
                tape.add(y, r)
            }
            None => Ok(y),
        }
    }
}

/// mv_linear, rejection nonlinearity, mv_linear.
#[derive(Clone, Debug)]
pub struct MvnMlp {
    pub first: MvLinear,
    pub act: MvnNonlinearity,
    pub second: MvLinear,
}

impl MvnMlp {
    pub fn new(name: &str, c_in: usize, c_hidden: usize, c_out: usize) -> Self {
        Self {
            first: MvLinear::new(format!("{name}.0"), c_in, c_hidden),
            act: MvnNonlinearity::new(&format!("{name}.act"), c_hidden),
            second: MvLinear::new(format!("{name}.1"), c_hidden, c_out),
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        self.first.init(store, rng)?;
        self.act.init(store, rng)?;
        self.second.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, v: Var) -> Result<Var, GraphError> {
        let x = self.first.forward(tape, store, v)?;
        let x = self.act.forward(tape, store, x)?;
        self.second.forward(tape, store, x)
    }
}

/// Linear multivector perceptron: norm features feed a scalar MLP and a
/// sigmoid of the norms gates the multivector branch.
#[derive(Clone, Debug)]
pub struct MvpLin {
    pub mu: MvLinear,
    pub h: MvLinear,
    pub phi: ScalarMlp,
    pub per_grade: bool,
}

impl MvpLin {
    pub fn new(name: &str, s_in: usize, c_in: usize, s_out: usize, c_out: usize, hidden: usize, per_grade: bool) -> Self {
        let norms = if per_grade { 4 * c_out } else { c_out };
        Self {
            mu: MvLinear::new(format!("{name}.mu"), c_in, c_out),
            h: MvLinear::new(format!("{name}.h"), c_in, c_out),
            phi: ScalarMlp::new(&format!("{name}.phi"), norms + s_in, hidden, s_out),
            per_grade,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        self.mu.init(store, rng)?;
        self.h.init(store, rng)?;
        self.phi.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, s: Var, v: Var) -> Result<(Var, Var), GraphError> {
        let v_mu = self.mu.forward(tape, store, v)?;
        let v_h = self.h.forward(tape, store, v)?;
        let q_mu = tape.mv_inner(v_mu, v_mu)?;
        let s_mu = tape.sqrt(q_mu);
        let q_h = if self.per_grade { tape.mv_grade_sq(v_h)? } else { tape.mv_inner(v_h, v_h)? };
        let s_h = tape.sqrt(q_h);
        let feats = tape.concat(&[s_h, s], 1)?;
        let s_new = self.phi.forward(tape, store, feats)?;
        let gate = tape.sigmoid(s_mu);
        let v_new = tape.channel_scale(v_mu, gate)?;
        Ok((s_new, v_new))
    }
}

/// Geometric-product perceptron. The scalar MLP emits `s_out + c` values;
/// the last `c` overwrite the grade-0 slots of the multivector output.
#[derive(Clone, Debug)]
pub struct MvpGp {
    pub psi: GeometricProductLayer,
    pub lin: MvLinear,
    pub phi: ScalarMlp,
    pub s_out: usize,
    pub channels: usize,
}

impl MvpGp {
    pub fn new(name: &str, s_in: usize, channels: usize, s_out: usize, hidden: usize, composition: PsiComposition) -> Self {
        Self {
            psi: GeometricProductLayer::new(&format!("{name}.psi"), channels, composition),
            lin: MvLinear::new(format!("{name}.lin"), channels, channels),
            phi: ScalarMlp::new(&format!("{name}.phi"), s_in + channels, hidden, s_out + channels),
            s_out,
            channels,
        }
    }

    pub fn init(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<(), GraphError> {
        self.psi.init(store, rng)?;
        self.lin.init(store, rng)?;
        self.phi.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, s: Var, v: Var) -> Result<(Var, Var), GraphError> {
        let m = check_mv(tape, "mvp_gp", v, self.channels)?;
        let c = self.channels;
        let w = self.psi.forward(tape, store, v)?;
        let wv = tape.add(w, v)?;
        let u = self.lin.forward(tape, store, wv)?;
        let u0 = tape.select_last(u, &[0])?;
        let u0 = tape.reshape(u0, &[m, c])?;
        let feats = tape.concat(&[s, u0], 1)?;
        let out = self.phi.forward(tape, store, feats)?;
        let s_new = tape.slice(out, 1, 0, self.s_out)?;
        let g = tape.slice(out, 1, self.s_out, c)?;
        let g = tape.reshape(g, &[m, c, 1])?;
        let rest = tape.select_last(u, &[1, 2, 3, 4, 5, 6, 7])?;
        let v_new = tape.concat(&[g, rest], 2)?;
        Ok((s_new, v_new))
    }
}
