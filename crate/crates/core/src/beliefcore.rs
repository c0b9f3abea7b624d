//! Reasoning primitives shared by the propagation passes: feature
//! transformation, entity and relation similarity, belief normalization,
//! gated fusion, top-K selection, soft-AND aggregation and classification.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormGuard, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Linear, Mlp, ParamGroup, ParamStore};

/// Guard used by norm divisions and log-space floors.
pub const EPS: f64 = 1e-8;

/// Belief values over an index set of proposal ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub values: Vec<f64>,
    pub index: Vec<usize>,
}

impl Belief {
    /// Belief over proposals `0..values.len()`.
    pub fn full(values: Vec<f64>) -> Self {
        let index = (0..values.len()).collect();
        Self { values, index }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Proposal id with the largest value; ties go to the lowest id.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(f64, usize)> = None;
        for (&v, &id) in self.values.iter().zip(&self.index) {
            best = match best {
                Some((bv, bid)) if bv > v || (bv == v && bid < id) => Some((bv, bid)),
                _ => Some((v, id)),
            };
        }
        best.map(|b| b.1)
    }
}

/// Positions of the `k` largest values, largest first; ties go to the
/// lower position.
pub fn topk_positions(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Restrict `b` to its `k` largest values (ties to the lower proposal id),
/// keeping the original index order.
pub fn select_topk(b: &Belief, k: usize) -> Belief {
    let mut order: Vec<usize> = (0..b.len()).collect();
    order.sort_by(|&x, &y| b.values[y].total_cmp(&b.values[x]).then(b.index[x].cmp(&b.index[y])));
    order.truncate(k.max(1));
    order.sort_unstable();
    Belief { values: order.iter().map(|&p| b.values[p]).collect(), index: order.iter().map(|&p| b.index[p]).collect() }
}

/// `L2Norm(MLP(x))` applied row-wise.
pub fn f_trf<'t>(tape: &'t Tape, store: &ParamStore, mlp: &Mlp, x: Var<'t>) -> Var<'t> {
    mlp.forward(tape, store, x).normalize_rows(NormGuard::Floor(EPS))
}

/// Parameters of the learned entity similarity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EntitySim {
    pub trf: Mlp,
    pub w_sim: Linear,
    pub w_eval: Linear,
}

impl EntitySim {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, trf: usize, sim: usize) -> Self {
        let g = ParamGroup::Reasoning;
        Self {
            trf: trf_mlp(store, rng, name, input, trf),
            w_sim: Linear::new(store, rng, &format!("{name}.w_sim"), trf, sim, false, g),
            w_eval: Linear::new(store, rng, &format!("{name}.w_eval"), sim, 1, false, g),
        }
    }
}

/// Relation similarity parameters: one transformation shared by both sides.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RelationSim {
    pub trf: Mlp,
}

impl RelationSim {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, trf: usize) -> Self {
        Self { trf: trf_mlp(store, rng, name, input, trf) }
    }
}

/// Feature transformation whose output bias starts off zero. With a zero
/// bias, inputs that switch off every hidden unit map to the zero vector,
/// where the L2 normalization is not differentiable.
fn trf_mlp(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, trf: usize) -> Mlp {
    let mlp = Mlp::new(store, rng, &format!("{name}.trf"), &[input, trf, trf], ParamGroup::Reasoning);
    let bias = mlp.last().bias.expect("mlp layers carry a bias");
    for b in store.value_mut(bias).data.iter_mut() {
        *b = rng.random_range(-0.5..0.5);
    }
    mlp
}

/// `tanh(W_eval^T ReLU(u / (|u| + eps)))` with
/// `u = W_sim^T (f_trf(x) - f_trf(y))^2` for every row pair of `x` (`n x d`)
/// and `y` (`m x d`); returns `n x m`.
pub fn sim_ent<'t>(tape: &'t Tape, store: &ParamStore, p: &EntitySim, x: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let ((n, dx), (m, dy)) = (x.shape(), y.shape());
    if dx != dy {
        return Err(Error::DimensionMismatch { expected: dx, actual: dy });
    }
    let fx = f_trf(tape, store, &p.trf, x);
    let fy = f_trf(tape, store, &p.trf, y);
    let rows_x = (0..n).flat_map(|i| std::iter::repeat_n(i, m)).collect();
    let rows_y = (0..n).flat_map(|_| 0..m).collect();
    let diff = fx.gather_rows(rows_x).sub(fy.gather_rows(rows_y)).square();
    let u = p.w_sim.forward(tape, store, diff).normalize_rows(NormGuard::Additive(EPS)).relu();
    Ok(p.w_eval.forward(tape, store, u).tanh().reshape(n, m))
}

/// `ReLU(<f_trf(r_e), f_trf(r_o)>)` for every row pair; returns `n x m`.
pub fn sim_rel<'t>(tape: &'t Tape, store: &ParamStore, p: &RelationSim, re: Var<'t>, ro: Var<'t>) -> Result<Var<'t>> {
    let (dx, dy) = (re.shape().1, ro.shape().1);
    if dx != dy {
        return Err(Error::DimensionMismatch { expected: dx, actual: dy });
    }
    let a = f_trf(tape, store, &p.trf, re);
    let b = f_trf(tape, store, &p.trf, ro);
    Ok(a.matmul(b.transpose()).relu())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Rescale into `[-1, 1]`, then map affinely onto `[0, 1]`.
    SignedToUnit,
    /// Rescale into `[-1, 1]` only.
    Unit,
}

/// Divide by the largest magnitude when it exceeds 1, then apply `mode`.
pub fn f_norm(b: Var<'_>, mode: NormMode) -> Var<'_> {
    let r = b.div_max_abs();
    match mode {
        NormMode::Unit => r,
        NormMode::SignedToUnit => r.scale(0.5).offset(0.5),
    }
}

/// Value-level [`f_norm`].
pub fn f_norm_values(values: &[f64], mode: NormMode) -> Vec<f64> {
    let m = values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    values
        .iter()
        .map(|&x| {
            let y = if m > 1.0 { x / m } else { x };
            match mode {
                NormMode::Unit => y,
                NormMode::SignedToUnit => y * 0.5 + 0.5,
            }
        })
        .collect()
}

/// Gate features `[h_e, sorted top-K b_app, sorted top-K b_pos]`, detached
/// from the graph so no gradient reaches the gate inputs.
pub fn gate_input<'t>(tape: &'t Tape, he: Var<'t>, b_app: Var<'t>, b_pos: Var<'t>, k: usize) -> Var<'t> {
    let sorted = |b: Var<'t>| {
        let order = b.with_value(|v| topk_positions(&v.data, k));
        let mut idx: Vec<Option<usize>> = order.into_iter().map(Some).collect();
        idx.resize(k, None);
        b.gather_cols(idx)
    };
    tape.concat_cols(&[he, sorted(b_app), sorted(b_pos)]).stop_gradient()
}

/// Width of [`gate_input`] for phrase states of size `hidden`.
pub fn gate_input_dim(hidden: usize, k: usize) -> usize {
    hidden + 2 * k
}

/// One sigmoid gate per fused belief.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateSumParams {
    pub w: Linear,
}

impl GateSumParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, gate_dim: usize, parts: usize) -> Self {
        Self { w: Linear::new(store, rng, name, gate_dim, parts, true, ParamGroup::Reasoning) }
    }
}

/// `F_norm(sum_t sigmoid(W_t^T g) b_t)` in signed-to-unit mode. `parts` are
/// `1 x n` beliefs over a shared index set.
pub fn gate_sum<'t>(tape: &'t Tape, store: &ParamStore, p: &GateSumParams, gate: Var<'t>, parts: &[Var<'t>]) -> Result<Var<'t>> {
    let n = parts.first().map(|b| b.shape()).ok_or(Error::IndexSetMismatch)?;
    if parts.iter().any(|b| b.shape() != n) || p.w.output_dim(store) != parts.len() {
        return Err(Error::IndexSetMismatch);
    }
    let gates = p.w.forward(tape, store, gate).sigmoid();
    let mut acc: Option<Var<'t>> = None;
    for (t, b) in parts.iter().enumerate() {
        let term = b.mul_scalar(gates.slice_cols(t, 1));
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(term),
        });
    }
    Ok(f_norm(acc.expect("at least one part"), NormMode::SignedToUnit))
}

/// Soft-AND over children: `exp(sum_c ln max(b_c A_c^T, eps))`. Each pair is
/// an alignment `rows x cols` and a `1 x cols` child belief; the result is
/// `1 x rows`.
pub fn aggregate<'t>(children: &[(Var<'t>, Var<'t>)]) -> Result<Var<'t>> {
    let rows = children.first().map(|c| c.0.shape().0).ok_or(Error::IndexSetMismatch)?;
    let mut log_sum: Option<Var<'t>> = None;
    for &(a, b) in children {
        if a.shape().0 != rows || b.shape() != (1, a.shape().1) {
            return Err(Error::IndexSetMismatch);
        }
        let msg = b.matmul(a.transpose()).ln_floor(EPS);
        log_sum = Some(match log_sum {
            None => msg,
            Some(s) => s.add(msg),
        });
    }
    Ok(log_sum.expect("at least one child").exp())
}

/// Value-level direct-product form of [`aggregate`], used as a reference.
pub fn aggregate_direct(children: &[(Vec<Vec<f64>>, Vec<f64>)]) -> Vec<f64> {
    let rows = children.first().map_or(0, |c| c.0.len());
    let mut out = vec![1.0; rows];
    for (a, b) in children {
        for (o, row) in out.iter_mut().zip(a) {
            let m: f64 = row.iter().zip(b).map(|(x, y)| x * y).sum();
            *o *= m.max(EPS);
        }
    }
    out
}

/// `sigmoid(W_rel^T g)` as a `1 x 1` node.
pub fn gate_beta<'t>(tape: &'t Tape, store: &ParamStore, w_rel: &Linear, gate: Var<'t>) -> Var<'t> {
    w_rel.forward(tape, store, gate).sigmoid()
}

/// `F_norm(b_loc * b_agg^beta)` in unit mode, the power taken in log space.
pub fn gate_prod<'t>(b_loc: Var<'t>, b_agg: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    if b_loc.shape() != b_agg.shape() {
        return Err(Error::IndexSetMismatch);
    }
    let power = b_agg.ln_floor(EPS).mul_scalar(beta).exp();
    Ok(f_norm(b_loc.mul(power), NormMode::Unit))
}

/// Confidence head over sorted beliefs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Classifier {
    pub mlp: Mlp,
    pub k: usize,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, k: usize, hidden: usize) -> Self {
        Self { mlp: Mlp::new(store, rng, name, &[k, hidden, 1], ParamGroup::Reasoning), k }
    }
}

/// `sigmoid(MLP(sort_desc(b)[..K]))`, zero-padded to `K`.
pub fn classify<'t>(tape: &'t Tape, store: &ParamStore, p: &Classifier, b: Var<'t>) -> Var<'t> {
    let order = b.with_value(|v| topk_positions(&v.data, p.k));
    let mut idx: Vec<Option<usize>> = order.into_iter().map(Some).collect();
    idx.resize(p.k, None);
    p.mlp.forward(tape, store, b.gather_cols(idx)).sigmoid()
}
