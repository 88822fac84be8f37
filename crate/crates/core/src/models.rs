//! Message-passing networks: the EGNN baseline and the three Clifford
//! architectures, plus featurization and position readout.
//!
//! Edges are directed `(receiver, sender)` pairs; messages flow from the
//! sender into the receiver. Positions are centered per graph before they
//! enter the multivector stream and the center is added back at readout.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clifford::{OrthogonalMap, BLADES};
use crate::datasets::{DatasetError, Task, TrajectorySample, Vec3, DENOISE_K};
use crate::diffgraph::{GraphError, ParameterStore, Tape, Tensor, Var};
use crate::layers::{
    transform_mv, GeometricProductLayer, Linear, MvLinear, MvnMlp, MvpGp, MvpLin, PsiComposition, ScalarMlp,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    CliffordEgnn,
    MvnGnn,
    MvpGnn,
    Egnn,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Egnn,
        Architecture::CliffordEgnn,
        Architecture::MvnGnn,
        Architecture::MvpGnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::CliffordEgnn => "clifford-egnn",
            Architecture::MvnGnn => "mvn-gnn",
            Architecture::MvpGnn => "mvp-gnn",
            Architecture::Egnn => "egnn",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown model `{s}` (expected egnn, clifford-egnn, mvn-gnn or mvp-gnn)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub layers: usize,
    pub channels: usize,
    pub scalar_width: usize,
    pub hidden: usize,
    pub task: Task,
    #[serde(default)]
    pub per_grade_invariants: bool,
    #[serde(default)]
    pub psi: PsiComposition,
}

impl ModelConfig {
    pub fn new(architecture: Architecture, task: Task) -> Self {
        Self {
            architecture,
            layers: 4,
            channels: 16,
            scalar_width: 64,
            hidden: 64,
            task,
            per_grade_invariants: false,
            psi: PsiComposition::Residual,
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        if self.layers == 0 || self.channels == 0 || self.scalar_width == 0 || self.hidden == 0 {
            return Err(GraphError::Contract(format!(
                "model config needs layers, channels, scalar width and hidden width >= 1, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Width of the raw invariant node features.
    pub fn h_in(&self) -> usize {
        match self.task {
            Task::Nbody => 1,
            Task::Denoise => 3,
        }
    }

    /// Number of raw multivector channels.
    pub fn v_in(&self) -> usize {
        match self.task {
            Task::Nbody => 2,
            Task::Denoise => 1,
        }
    }
}

/// A batch of graphs with raw features.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphBatch {
    pub task: Task,
    /// `(N, f)` invariant node features.
    pub h: Tensor,
    /// `(N, c_raw, 8)` grade-1 embeddings of centered positions (and velocities).
    pub v: Tensor,
    pub receivers: Vec<usize>,
    pub senders: Vec<usize>,
    pub graph_id: Vec<usize>,
    pub deg: Vec<usize>,
    pub n_graphs: usize,
    /// `(N, 3)` per-graph center, repeated per node.
    pub center: Tensor,
    /// `(N, 3)` uncentered input positions.
    pub x0: Tensor,
    /// `(N, 3)` target positions.
    pub target: Tensor,
}

fn vec3_tensor(rows: &[Vec3]) -> Tensor {
    Tensor::new(vec![rows.len(), 3], rows.iter().flatten().copied().collect()).expect("n x 3")
}

fn embed_vectors(rows: &[Vec<Vec3>]) -> Tensor {
    let n = rows[0].len();
    let c = rows.len();
    let mut data = vec![0.0; n * c * BLADES];
    for (ch, vs) in rows.iter().enumerate() {
        for (i, x) in vs.iter().enumerate() {
            let off = (i * c + ch) * BLADES;
            data[off + 1..off + 4].copy_from_slice(x);
        }
    }
    Tensor::new(vec![n, c, BLADES], data).expect("n x c x 8")
}

/// Indices of the `k` nearest other nodes, ties broken by index.
pub fn knn(x: &[Vec3], k: usize) -> Result<Vec<Vec<usize>>, DatasetError> {
    if x.len() < k + 1 {
        return Err(DatasetError::GraphTooSmall {
            nodes: x.len(),
            needed: k + 1,
        });
    }
    Ok((0..x.len())
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..x.len())
                .filter(|&j| j != i)
                .map(|j| ((0..3).map(|a| (x[i][a] - x[j][a]).powi(2)).sum(), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect())
}

/// Builds one batch from several samples of the same task.
pub fn featurize(samples: &[TrajectorySample], task: Task) -> Result<GraphBatch, DatasetError> {
    if samples.is_empty() {
        return Err(DatasetError::Invalid("featurize: empty sample list".into()));
    }
    let mut h = Vec::new();
    let mut v_parts: Vec<Tensor> = Vec::new();
    let (mut receivers, mut senders, mut graph_id) = (Vec::new(), Vec::new(), Vec::new());
    let (mut center, mut x0, mut target) = (Vec::new(), Vec::new(), Vec::new());
    let mut base = 0;
    for (g, s) in samples.iter().enumerate() {
        let n = s.len();
        if n == 0 || s.v0.len() != n || s.q.len() != n || s.x_target.len() != n {
            return Err(DatasetError::Invalid(format!("featurize: sample {g} has inconsistent lengths")));
        }
        let mean: Vec3 = [0, 1, 2].map(|k| s.x0.iter().map(|p| p[k]).sum::<f64>() / n as f64);
        let centered: Vec<Vec3> = s.x0.iter().map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect();
        match task {
            Task::Nbody => {
                h.extend(s.q.iter().copied());
                v_parts.push(embed_vectors(&[centered.clone(), s.v0.clone()]));
                for i in 0..n {
                    for j in (0..n).filter(|&j| j != i) {
                        receivers.push(base + i);
                        senders.push(base + j);
                    }
                }
            }
            Task::Denoise => {
                for &role in &s.q {
                    let mut one_hot = [0.0; 3];
                    let r = role as usize;
                    if role.fract() != 0.0 || r > 2 {
                        return Err(DatasetError::Invalid(format!("featurize: atom role {role}")));
                    }
                    one_hot[r] = 1.0;
                    h.extend(one_hot);
                }
                v_parts.push(embed_vectors(std::slice::from_ref(&centered)));
                for (i, nbrs) in knn(&s.x0, DENOISE_K)?.into_iter().enumerate() {
                    for j in nbrs {
                        receivers.push(base + i);
                        senders.push(base + j);
                    }
                }
            }
        }
        graph_id.extend(std::iter::repeat_n(g, n));
        center.extend(std::iter::repeat_n(mean, n));
        x0.extend_from_slice(&s.x0);
        target.extend_from_slice(&s.x_target);
        base += n;
    }
    let f = h.len() / base;
    let c = v_parts[0].shape()[1];
    let v_data: Vec<f64> = v_parts.into_iter().flat_map(Tensor::into_data).collect();
    let mut deg = vec![0; base];
    for &r in &receivers {
        deg[r] += 1;
    }
    Ok(GraphBatch {
        task,
        h: Tensor::new(vec![base, f], h).expect("n x f"),
        v: Tensor::new(vec![base, c, BLADES], v_data).expect("n x c x 8"),
        receivers,
        senders,
        graph_id,
        deg,
        n_graphs: samples.len(),
        center: vec3_tensor(&center),
        x0: vec3_tensor(&x0),
        target: vec3_tensor(&target),
    })
}

impl GraphBatch {
    pub fn n_nodes(&self) -> usize {
        self.graph_id.len()
    }

    pub fn n_edges(&self) -> usize {
        self.receivers.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.n_nodes();
        let bad = |msg: String| Err(GraphError::Contract(format!("graph batch: {msg}")));
        if self.h.shape()[0] != n || self.v.shape()[0] != n || self.deg.len() != n {
            return bad(format!("node count mismatch ({n} nodes)"));
        }
        if self.senders.len() != self.receivers.len() {
            return bad("sender and receiver lists differ in length".into());
        }
        let mut count = vec![0; n];
        for (&r, &s) in self.receivers.iter().zip(&self.senders) {
            if r >= n || s >= n {
                return bad(format!("edge ({r}, {s}) out of range"));
            }
            if self.graph_id[r] != self.graph_id[s] {
                return bad(format!("edge ({r}, {s}) crosses graphs"));
            }
            count[r] += 1;
        }
        if let Some(i) = (0..n).find(|&i| count[i] != self.deg[i]) {
            return bad(format!("deg[{i}] = {} but node {i} receives {} edges", self.deg[i], count[i]));
        }
        Ok(())
    }

    /// `1 / sqrt(deg)` per node, 0 for isolated nodes.
    pub fn inv_sqrt_deg(&self) -> Vec<f64> {
        self.deg.iter().map(|&d| if d == 0 { 0.0 } else { 1.0 / (d as f64).sqrt() }).collect()
    }

    /// Replaces the edge list and recomputes degrees.
    pub fn with_edges(mut self, edges: &[(usize, usize)]) -> Self {
        self.receivers = edges.iter().map(|e| e.0).collect();
        self.senders = edges.iter().map(|e| e.1).collect();
        self.deg = vec![0; self.n_nodes()];
        for &r in &self.receivers {
            self.deg[r] += 1;
        }
        self
    }

    /// The batch whose inputs and targets are acted on by `r`.
    pub fn transformed(&self, r: &OrthogonalMap) -> Self {
        let rot3 = |t: &Tensor| {
            let data = t
                .data()
                .chunks_exact(3)
                .flat_map(|p| r.apply_vector([p[0], p[1], p[2]]))
                .collect();
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        Self {
            v: transform_mv(&self.v, r),
            center: rot3(&self.center),
            x0: rot3(&self.x0),
            target: rot3(&self.target),
            ..self.clone()
        }
    }

    /// Raw vector channel `ch` as an `(N, 3)` tensor.
    pub fn vector_channel(&self, ch: usize) -> Tensor {
        let c = self.v.shape()[1];
        let data = self
            .v
            .data()
            .chunks_exact(c * BLADES)
            .flat_map(|row| row[ch * BLADES + 1..ch * BLADES + 4].to_vec())
            .collect();
        Tensor::new(vec![self.n_nodes(), 3], data).expect("n x 3")
    }
}

/// Graph connectivity shared by every layer of one forward pass.
pub struct Graph<'a> {
    pub receivers: &'a [usize],
    pub senders: &'a [usize],
    pub n_nodes: usize,
    pub inv_sqrt_deg: Vec<f64>,
}

impl<'a> Graph<'a> {
    pub fn new(batch: &'a GraphBatch) -> Self {
        Self {
            receivers: &batch.receivers,
            senders: &batch.senders,
            n_nodes: batch.n_nodes(),
            inv_sqrt_deg: batch.inv_sqrt_deg(),
        }
    }

    fn pair(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var), GraphError> {
        Ok((tape.gather(x, self.receivers)?, tape.gather(x, self.senders)?))
    }

    fn aggregate(&self, tape: &mut Tape, x: Var) -> Result<Var, GraphError> {
        tape.scatter_sum(x, self.receivers, self.n_nodes)
    }

    fn aggregate_normalized(&self, tape: &mut Tape, x: Var) -> Result<Var, GraphError> {
        let s = self.aggregate(tape, x)?;
        tape.row_scale(s, &self.inv_sqrt_deg)
    }
}

/// Plain-vector EGNN layer with an added velocity term.
#[derive(Clone, Debug)]
pub struct EgnnLayer {
    phi_e: ScalarMlp,
    phi_x: ScalarMlp,
    phi_h: ScalarMlp,
    phi_vel: Option<ScalarMlp>,
}

impl EgnnLayer {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let (s, hid) = (cfg.scalar_width, cfg.hidden);
        Self {
            phi_e: ScalarMlp::new(&format!("{name}.phi_e"), 2 * s + 1, hid, hid),
            phi_x: ScalarMlp::new(&format!("{name}.phi_x"), hid, hid, 1),
            phi_h: ScalarMlp::new(&format!("{name}.phi_h"), s + hid, hid, s),
            phi_vel: (cfg.task == Task::Nbody).then(|| ScalarMlp::new(&format!("{name}.phi_vel"), s, hid, 1)),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
        for m in [&self.phi_e, &self.phi_x, &self.phi_h].into_iter().chain(&self.phi_vel) {
            m.init(store, rng)?;
        }
        Ok(())
    }

    /// `x` and `vel` are `(N, 3)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        g: &Graph,
        h: Var,
        x: Var,
        vel: Option<Var>,
    ) -> Result<(Var, Var), GraphError> {
        let e = g.receivers.len();
        let (xi, xj) = g.pair(tape, x)?;
        let diff = tape.sub(xi, xj)?;
        let sq = tape.mul(diff, diff)?;
        let d2 = tape.sum(sq, 1)?;
        let dist = tape.sqrt(d2);
        let dist = tape.reshape(dist, &[e, 1])?;
        let (hi, hj) = g.pair(tape, h)?;
        let s_ij = tape.concat(&[hi, hj, dist], 1)?;
        let m = self.phi_e.forward(tape, store, s_ij)?;
        let w = self.phi_x.forward(tape, store, m)?;
        let diff3 = tape.reshape(diff, &[e, 1, 3])?;
        let upd = tape.channel_scale(diff3, w)?;
        let upd = tape.reshape(upd, &[e, 3])?;
        let upd = g.aggregate(tape, upd)?;
        let mut x_new = tape.add(x, upd)?;
        if let (Some(phi_vel), Some(vel)) = (&self.phi_vel, vel) {
            let n = g.n_nodes;
            let gate = phi_vel.forward(tape, store, h)?;
            let vel3 = tape.reshape(vel, &[n, 1, 3])?;
            let dv = tape.channel_scale(vel3, gate)?;
            let dv = tape.reshape(dv, &[n, 3])?;
            x_new = tape.add(x_new, dv)?;
        }
        let m_i = g.aggregate(tape, m)?;
        let hm = tape.concat(&[h, m_i], 1)?;
        let h_new = self.phi_h.forward(tape, store, hm)?;
        Ok((h_new, x_new))
    }
}

/// Message, gate, aggregate and update steps shared by the Clifford-EGNN
/// and MVN-GNN layers once the edge multivectors are known.
#[derive(Clone, Debug)]
struct GatedUpdate {
    phi_e: ScalarMlp,
    phi_v: ScalarMlp,
    psi: GeometricProductLayer,
    phi_h: ScalarMlp,
    per_grade: bool,
}

impl GatedUpdate {
    fn new(name: &str, cfg: &ModelConfig) -> Self {
        let (s, c, hid) = (cfg.scalar_width, cfg.channels, cfg.hidden);
        let inv = if cfg.per_grade_invariants { 4 * c } else { c };
        Self {
            phi_e: ScalarMlp::new(&format!("{name}.phi_e"), 2 * s + inv, hid, hid),
            phi_v: ScalarMlp::new(&format!("{name}.phi_v"), hid, hid, c),
            psi: GeometricProductLayer::new(&format!("{name}.psi"), c, cfg.psi),
            phi_h: ScalarMlp::new(&format!("{name}.phi_h"), s + hid, hid, s),
            per_grade: cfg.per_grade_invariants,
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
        self.phi_e.init(store, rng)?;
        self.phi_v.init(store, rng)?;
        self.psi.init(store, rng)?;
        self.phi_h.init(store, rng)
    }

    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        g: &Graph,
        h: Var,
        v: Var,
        v_ij: Var,
    ) -> Result<(Var, Var), GraphError> {
        let inv = if self.per_grade { tape.mv_grade_sq(v_ij)? } else { tape.mv_inner(v_ij, v_ij)? };
        let (hi, hj) = g.pair(tape, h)?;
        let s_ij = tape.concat(&[hi, hj, inv], 1)?;
        let m = self.phi_e.forward(tape, store, s_ij)?;
        let gate = self.phi_v.forward(tape, store, m)?;
        let gated = tape.channel_scale(v_ij, gate)?;
        let agg = g.aggregate(tape, gated)?;
        let upd = self.psi.forward(tape, store, agg)?;
        let upd = tape.row_scale(upd, &g.inv_sqrt_deg)?;
        let v_new = tape.add(v, upd)?;
        let m_i = g.aggregate(tape, m)?;
        let hm = tape.concat(&[h, m_i], 1)?;
        let h_new = self.phi_h.forward(tape, store, hm)?;
        Ok((h_new, v_new))
    }
}

#[derive(Clone, Debug)]
pub struct CliffordEgnnLayer {
    phi_e_mv: MvLinear,
    update: GatedUpdate,
}

impl CliffordEgnnLayer {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        Self {
            phi_e_mv: MvLinear::new(format!("{name}.phi_e_mv"), cfg.channels, cfg.channels),
            update: GatedUpdate::new(name, cfg),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
        self.phi_e_mv.init(store, rng)?;
        self.update.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, g: &Graph, h: Var, v: Var) -> Result<(Var, Var), GraphError> {
        // The map is linear, so phi(v_i - v_j) = phi(v)_i - phi(v)_j; apply it per node.
        let u = self.phi_e_mv.forward(tape, store, v)?;
        let (ui, uj) = g.pair(tape, u)?;
        let v_ij = tape.sub(ui, uj)?;
        self.update.forward(tape, store, g, h, v, v_ij)
    }
}

#[derive(Clone, Debug)]
pub struct MvnGnnLayer {
    phi_e_mv: MvnMlp,
    update: GatedUpdate,
}

impl MvnGnnLayer {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.channels;
        Self {
            phi_e_mv: MvnMlp::new(&format!("{name}.phi_e_mv"), 2 * c, c, c),
            update: GatedUpdate::new(name, cfg),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
        self.phi_e_mv.init(store, rng)?;
        self.update.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, g: &Graph, h: Var, v: Var) -> Result<(Var, Var), GraphError> {
        let (vi, vj) = g.pair(tape, v)?;
        let pair = tape.concat(&[vi, vj], 1)?;
        let v_ij = self.phi_e_mv.forward(tape, store, pair)?;
        self.update.forward(tape, store, g, h, v, v_ij)
    }
}

#[derive(Clone, Debug)]
pub struct MvpGnnLayer {
    phi_e_mv: MvLinear,
    phi_e: ScalarMlp,
    lin_e: MvpLin,
    gp_e: MvpGp,
    lin_v: MvpLin,
    gp_v: MvpGp,
}

impl MvpGnnLayer {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let (s, c, hid, pg) = (cfg.scalar_width, cfg.channels, cfg.hidden, cfg.per_grade_invariants);
        Self {
            phi_e_mv: MvLinear::new(format!("{name}.phi_e_mv"), 2 * c, c),
            phi_e: ScalarMlp::new(&format!("{name}.phi_e"), 2 * s, hid, s),
            lin_e: MvpLin::new(&format!("{name}.lin_e"), s, c, s, c, hid, pg),
            gp_e: MvpGp::new(&format!("{name}.gp_e"), s, c, s, hid, cfg.psi),
            lin_v: MvpLin::new(&format!("{name}.lin_v"), 2 * s, 2 * c, s, c, hid, pg),
            gp_v: MvpGp::new(&format!("{name}.gp_v"), s, c, s, hid, cfg.psi),
        }
    }

    fn init(&self, store: &mut ParameterStore, rng: &mut ChaCha8Rng) -> Result<(), GraphError> {
        self.phi_e_mv.init(store, rng)?;
        self.phi_e.init(store, rng)?;
        self.lin_e.init(store, rng)?;
        self.gp_e.init(store, rng)?;
        self.lin_v.init(store, rng)?;
        self.gp_v.init(store, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, g: &Graph, h: Var, v: Var) -> Result<(Var, Var), GraphError> {
        let (vi, vj) = g.pair(tape, v)?;
        let pair = tape.concat(&[vi, vj], 1)?;
        let v_ij = self.phi_e_mv.forward(tape, store, pair)?;
        let (hi, hj) = g.pair(tape, h)?;
        let hh = tape.concat(&[hi, hj], 1)?;
        let s_ij = self.phi_e.forward(tape, store, hh)?;
        let (s_ij, v_ij) = self.lin_e.forward(tape, store, s_ij, v_ij)?;
        let (s_ij, v_ij) = self.gp_e.forward(tape, store, s_ij, v_ij)?;
        let s_agg = g.aggregate_normalized(tape, s_ij)?;
        let v_agg = g.aggregate_normalized(tape, v_ij)?;
        let s_cat = tape.concat(&[h, s_agg], 1)?;
        let v_cat = tape.concat(&[v, v_agg], 1)?;
        let (s_new, v_new) = self.lin_v.forward(tape, store, s_cat, v_cat)?;
        let (s_new, v_new) = self.gp_v.forward(tape, store, s_new, v_new)?;
        Ok((tape.add(h, s_new)?, tape.add(v, v_new)?))
    }
}

#[derive(Clone, Debug)]
enum Body {
    Egnn(Vec<EgnnLayer>),
    Clifford(Vec<CliffordEgnnLayer>),
    Mvn(Vec<MvnGnnLayer>),
    Mvp(Vec<MvpGnnLayer>),
}

/// Outputs of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `(N, 3)` predicted positions.
    pub positions: Var,
    /// `(N, s)` final invariant features.
    pub h: Var,
    /// `(N, c, 8)` final multivectors; `None` for EGNN.
    pub v: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    embed_h: Linear,
    embed_v: MvLinear,
    readout: MvLinear,
    body: Body,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self, GraphError> {
        config.validate()?;
        let name = |l: usize| format!("layer{l}");
        let body = match config.architecture {
            Architecture::Egnn => Body::Egnn((0..config.layers).map(|l| EgnnLayer::new(&name(l), &config)).collect()),
            Architecture::CliffordEgnn => {
                Body::Clifford((0..config.layers).map(|l| CliffordEgnnLayer::new(&name(l), &config)).collect())
            }
            Architecture::MvnGnn => Body::Mvn((0..config.layers).map(|l| MvnGnnLayer::new(&name(l), &config)).collect()),
            Architecture::MvpGnn => Body::Mvp((0..config.layers).map(|l| MvpGnnLayer::new(&name(l), &config)).collect()),
        };
        Ok(Self {
            embed_h: Linear::new("embed.h", config.h_in(), config.scalar_width),
            embed_v: MvLinear::new("embed.v", config.v_in(), config.channels),
            readout: MvLinear::new("readout", config.channels, 1),
            body,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParameterStore, GraphError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        self.embed_h.init(&mut store, &mut rng)?;
        match &self.body {
            Body::Egnn(ls) => ls.iter().try_for_each(|l| l.init(&mut store, &mut rng))?,
            Body::Clifford(ls) => {
                self.embed_v.init(&mut store, &mut rng)?;
                ls.iter().try_for_each(|l| l.init(&mut store, &mut rng))?
            }
            Body::Mvn(ls) => {
                self.embed_v.init(&mut store, &mut rng)?;
                ls.iter().try_for_each(|l| l.init(&mut store, &mut rng))?
            }
            Body::Mvp(ls) => {
                self.embed_v.init(&mut store, &mut rng)?;
                ls.iter().try_for_each(|l| l.init(&mut store, &mut rng))?
            }
        }
        if !matches!(self.body, Body::Egnn(_)) {
            self.readout.init(&mut store, &mut rng)?;
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the parameters this model uses, with matching shapes.
    pub fn check_params(&self, store: &ParameterStore) -> Result<(), GraphError> {
        let fresh = self.init_params(0)?;
        for (name, p) in fresh.iter() {
            let got = store.get(name).ok_or_else(|| GraphError::MissingParam(name.to_string()))?;
            if got.value.shape() != p.value.shape() {
                return Err(GraphError::Contract(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    got.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = store.names().find(|n| fresh.get(n).is_none()) {
            return Err(GraphError::Contract(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch) -> Result<ModelOutput, GraphError> {
        batch.validate()?;
        if batch.task != self.config.task {
            return Err(GraphError::Contract(format!(
                "batch task {:?} does not match model task {:?}",
                batch.task, self.config.task
            )));
        }
        let g = Graph::new(batch);
        let h0 = tape.constant(batch.h.clone());
        let mut h = self.embed_h.forward(tape, store, h0)?;
        let center = tape.constant(batch.center.clone());
        if let Body::Egnn(layers) = &self.body {
            let mut x = tape.constant(batch.vector_channel(0));
            let vel = (self.config.task == Task::Nbody).then(|| tape.constant(batch.vector_channel(1)));
            for l in layers {
                (h, x) = l.forward(tape, store, &g, h, x, vel)?;
            }
            let positions = tape.add(x, center)?;
            return Ok(ModelOutput { positions, h, v: None });
        }
        let v0 = tape.constant(batch.v.clone());
        let mut v = self.embed_v.forward(tape, store, v0)?;
        match &self.body {
            Body::Clifford(ls) => {
                for l in ls {
                    (h, v) = l.forward(tape, store, &g, h, v)?;
                }
            }
            Body::Mvn(ls) => {
                for l in ls {
                    (h, v) = l.forward(tape, store, &g, h, v)?;
                }
            }
            Body::Mvp(ls) => {
                for l in ls {
                    (h, v) = l.forward(tape, store, &g, h, v)?;
                }
            }
            Body::Egnn(_) => unreachable!(),
        }
        let out = self.readout.forward(tape, store, v)?;
        let out = tape.select_last(out, &[1, 2, 3])?;
        let out = tape.reshape(out, &[batch.n_nodes(), 3])?;
        let anchor = match self.config.task {
            Task::Nbody => tape.constant(batch.x0.clone()),
            Task::Denoise => center,
        };
        let positions = tape.add(out, anchor)?;
        Ok(ModelOutput { positions, h, v: Some(v) })
    }

    /// Predicted positions without recording gradients.
    pub fn predict(&self, store: &ParameterStore, batch: &GraphBatch) -> Result<Tensor, GraphError> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, store, batch)?;
        Ok(tape.value(out.positions).clone())
    }

    /// Mean squared position error on `batch`, recorded on `tape`.
    pub fn loss(&self, tape: &mut Tape, store: &ParameterStore, batch: &GraphBatch) -> Result<Var, GraphError> {
        let out = self.forward(tape, store, batch)?;
        let target = tape.constant(batch.target.clone());
        tape.mse(out.positions, target)
    }
}

/// Predicted positions `(N, 3)` for `batch`.
pub fn model_forward(config: &ModelConfig, params: &ParameterStore, batch: &GraphBatch) -> Result<Tensor, GraphError> {
    Model::new(config.clone())?.predict(params, batch)
}

#[cfg(test)]
mod tests;
