//! Gating networks, routing planners and the uniformly encoded dispatch.
//!
//! Data selection splits each sample into `m = l / l_p` patches, scores every
//! patch against every expert and gives each expert exactly `c` patches,
//! where `c` is the largest number of first-stage (top-k per patch) picks any
//! expert received. Expert selection instead sends whole samples to their
//! top-k experts. Either way the result is flattened into one list of token
//! rows grouped into `(sample, expert)` units, so an entire routed block needs
//! one gather and one scatter-add regardless of how many experts take part.
//!
//! Every top-k breaks ties towards the lower index.

use std::cell::Cell;
use std::collections::hash_map::DefaultHasher;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use crate::error::{config_err, shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

thread_local! {
    static GATHERS: Cell<u64> = const { Cell::new(0) };
    static SCATTERS: Cell<u64> = const { Cell::new(0) };
}

/// Routed gather and scatter memory passes on this thread.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoutingPasses {
    pub gathers: u64,
    pub scatters: u64,
}

pub fn routing_passes() -> RoutingPasses {
    RoutingPasses {
        gathers: GATHERS.with(Cell::get),
        scatters: SCATTERS.with(Cell::get),
    }
}

pub fn reset_routing_passes() {
    GATHERS.with(|c| c.set(0));
    SCATTERS.with(|c| c.set(0));
}

fn count_gather() {
    GATHERS.with(|c| c.set(c.get() + 1));
}

fn count_scatter() {
    SCATTERS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SelectionMode {
    /// Every expert sees every token; no gate is evaluated.
    #[default]
    Full,
    Data,
    Expert,
    /// Expert selection picks the active experts of each sample, then data
    /// selection distributes patches among those experts only.
    Combined,
}

impl SelectionMode {
    pub fn uses_data_gate(self) -> bool {
        matches!(self, SelectionMode::Data | SelectionMode::Combined)
    }

    pub fn uses_expert_gate(self) -> bool {
        matches!(self, SelectionMode::Expert | SelectionMode::Combined)
    }
}

impl fmt::Display for SelectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMode::Full => "full",
            SelectionMode::Data => "data",
            SelectionMode::Expert => "expert",
            SelectionMode::Combined => "combined",
        })
    }
}

impl FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SelectionMode::Full),
            "data" | "data_selection" => Ok(SelectionMode::Data),
            "expert" | "expert_selection" => Ok(SelectionMode::Expert),
            "combined" => Ok(SelectionMode::Combined),
            other => Err(config_err(format!(
                "unknown selection mode `{other}` (expected full, data, expert or combined)"
            ))),
        }
    }
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    top_k_among(values, k, &(0..values.len()).collect::<Vec<_>>())
}

fn top_k_among(values: &[f64], k: usize, candidates: &[usize]) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(config_err(format!("top-k of {k} is outside 1..={n}")));
    }
    Ok(())
}

pub(crate) fn check_patch_len(l: usize, l_p: usize) -> Result<usize> {
    if l_p == 0 || !l.is_multiple_of(l_p) {
        return Err(config_err(format!(
            "sequence length {l} is not divisible by patch length {l_p}"
        )));
    }
    Ok(l / l_p)
}

/// `[l, d] -> [m, l_p, d]` contiguous, order-preserving patches.
pub fn split_patches<T: Scalar>(x: &Tensor<T>, l_p: usize) -> Result<Tensor<T>> {
    if x.ndim() != 2 {
        return Err(shape_err("split_patches", x.shape(), &[l_p]));
    }
    let m = check_patch_len(x.shape()[0], l_p)?;
    x.reshape(&[m, l_p, x.shape()[1]])
}

/// Two-layer patch gate: mean over the patch's tokens, `d -> h_g`, `h_g -> n`.
#[derive(Debug, Clone)]
pub struct DataGate<T: Scalar> {
    /// `[d, h_g]`
    pub w_pool: Tensor<T>,
    /// `[h_g, n]`
    pub w_out: Tensor<T>,
}

/// One-layer sample gate over the flattened sample (`[l·d, n]`) or, when
/// `pooled`, over the sequence mean (`[d, n]`).
#[derive(Debug, Clone)]
pub struct ExpertGate<T: Scalar> {
    pub w: Tensor<T>,
    pub pooled: bool,
}

#[derive(Debug, Clone, Default)]
pub struct GateParams<T: Scalar> {
    pub data: Option<DataGate<T>>,
    pub expert: Option<ExpertGate<T>>,
}

impl<T: Scalar> GateParams<T> {
    fn data_gate(&self) -> Result<&DataGate<T>> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::Contract("data selection needs data-gate weights".into()))
    }

    fn expert_gate(&self) -> Result<&ExpertGate<T>> {
        self.expert
            .as_ref()
            .ok_or_else(|| Error::Contract("expert selection needs expert-gate weights".into()))
    }
}

/// Patch gates for a whole batch: `x: [b, l, d] -> [b·m, n]`, each row a
/// distribution over experts.
pub fn data_gate_batch<T: Scalar>(x: &Tensor<T>, l_p: usize, gate: &DataGate<T>) -> Result<Tensor<T>> {
    if x.ndim() != 3 {
        return Err(shape_err("data_gate", x.shape(), gate.w_pool.shape()));
    }
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let m = check_patch_len(l, l_p)?;
    let pooled = x.reshape(&[b * m, l_p, d])?.mean_axis(1)?;
    pooled.matmul(&gate.w_pool)?.matmul(&gate.w_out)?.softmax(1)
}

/// Gating matrix `[n, m]` of one sample's patches; every column sums to 1.
pub fn data_gate<T: Scalar>(x_patches: &Tensor<T>, p: &GateParams<T>) -> Result<Tensor<T>> {
    if x_patches.ndim() != 3 {
        return Err(shape_err("data_gate", x_patches.shape(), &[]));
    }
    let (m, l_p, d) = (x_patches.shape()[0], x_patches.shape()[1], x_patches.shape()[2]);
    let x = x_patches.reshape(&[1, m * l_p, d])?;
    data_gate_batch(&x, l_p, p.data_gate()?)?.transpose_last2()
}

/// Per-sample expert gates `x: [b, l, d] -> [b, n]`.
pub fn expert_gate<T: Scalar>(x: &Tensor<T>, p: &GateParams<T>) -> Result<Tensor<T>> {
    let gate = p.expert_gate()?;
    if x.ndim() != 3 {
        return Err(shape_err("expert_gate", x.shape(), gate.w.shape()));
    }
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let features = if gate.pooled {
        x.mean_axis(1)?
    } else {
        if gate.w.shape()[0] != l * d {
            return Err(config_err(format!(
                "expert gate expects flattened samples of {} values, got l·d = {}",
                gate.w.shape()[0],
                l * d
            )));
        }
        x.reshape(&[b, l * d])?
    };
    features.matmul(&gate.w)?.softmax(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataRoutingPlan {
    pub n: usize,
    pub m: usize,
    pub k: usize,
    /// Gate values, `[n, m]` row-major.
    pub g: Vec<f64>,
    /// First-stage top-k experts of each patch, best first.
    pub id_prime: Vec<Vec<usize>>,
    /// Capacity: the largest first-stage count of any expert.
    pub c: usize,
    /// Ascending patch indices per expert; empty for inactive experts.
    pub id: Vec<Vec<usize>>,
    /// Experts eligible in this sample (all of them unless restricted).
    pub active: Vec<usize>,
}

impl DataRoutingPlan {
    pub fn stage1_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n];
        for picks in &self.id_prime {
            for &e in picks {
                counts[e] += 1;
            }
        }
        counts
    }

    /// Patch indices of all experts in expert order.
    pub fn flat_index(&self) -> Vec<usize> {
        self.id.iter().flatten().copied().collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("data routing plan: {msg}")));
        for j in 0..self.m {
            let col: f64 = (0..self.n).map(|i| self.g[i * self.m + j]).sum();
            if (col - 1.0).abs() > 1e-6 && self.active.len() == self.n {
                return fail(format!("gate column {j} sums to {col}"));
            }
        }
        let counts = self.stage1_counts();
        if self.c < 1 || self.c > self.m || Some(&self.c) != counts.iter().max() {
            return fail(format!("capacity {} vs stage-1 counts {counts:?}", self.c));
        }
        for &i in &self.active {
            let row = &self.id[i];
            if row.len() != self.c || row.iter().any(|&j| j >= self.m) || row.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("expert {i} patch list {row:?}"));
            }
        }
        Ok(())
    }
}

/// Two-stage data selection over `g: [n, m]`.
pub fn plan_data_selection<T: Scalar>(g: &Tensor<T>, k: usize) -> Result<DataRoutingPlan> {
    if g.ndim() != 2 {
        return Err(shape_err("plan_data_selection", g.shape(), &[]));
    }
    let (n, m) = (g.shape()[0], g.shape()[1]);
    plan_data_selection_among(&g.to_f64_vec(), n, m, k, &(0..n).collect::<Vec<_>>())
}

/// Data selection restricted to the `active` experts; the others receive
/// no patches.
pub fn plan_data_selection_among(g: &[f64], n: usize, m: usize, k: usize, active: &[usize]) -> Result<DataRoutingPlan> {
    if g.len() != n * m || m == 0 {
        return Err(shape_err("plan_data_selection", &[n, m], &[g.len()]));
    }
    if let Some(&bad) = active.iter().find(|&&i| i >= n) {
        return Err(Error::Index {
            op: "plan_data_selection",
            index: bad,
            bound: n,
        });
    }
    check_k(k, active.len())?;

    let id_prime: Vec<Vec<usize>> = (0..m)
        .map(|j| {
            let column: Vec<f64> = (0..n).map(|i| g[i * m + j]).collect();
            top_k_among(&column, k, active)
        })
        .collect();
    let mut counts = vec![0usize; n];
    for &e in id_prime.iter().flatten() {
        counts[e] += 1;
    }
    let c = counts.iter().copied().max().unwrap_or(0);

    let mut id = vec![Vec::new(); n];
    for &i in active {
        let mut row = top_k(&g[i * m..(i + 1) * m], c);
        row.sort_unstable();
        id[i] = row;
    }
    let mut active = active.to_vec();
    active.sort_unstable();
    Ok(DataRoutingPlan {
        n,
        m,
        k,
        g: g.to_vec(),
        id_prime,
        c,
        id,
        active,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertRoutingPlan {
    pub n: usize,
    pub k: usize,
    /// Gate values, `[b, n]` row-major.
    pub g: Vec<f64>,
    /// Top-k experts of each sample, best first.
    pub top: Vec<Vec<usize>>,
    /// Ascending sample indices per expert.
    pub assignments: Vec<Vec<usize>>,
}

impl ExpertRoutingPlan {
    pub fn counts(&self) -> Vec<usize> {
        self.assignments.iter().map(Vec::len).collect()
    }

    pub fn flat_index(&self) -> Vec<usize> {
        self.assignments.iter().flatten().copied().collect()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("expert routing plan: {msg}")));
        let b = self.top.len();
        for s in 0..b {
            let row: f64 = self.g[s * self.n..(s + 1) * self.n].iter().sum();
            if (row - 1.0).abs() > 1e-6 {
                return fail(format!("gate row {s} sums to {row}"));
            }
        }
        if self.counts().iter().sum::<usize>() != b * self.k {
            return fail(format!("counts {:?} do not total b·k = {}", self.counts(), b * self.k));
        }
        for (i, list) in self.assignments.iter().enumerate() {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return fail(format!("expert {i} sample list {list:?} is not ascending"));
            }
            for &s in list {
                if !self.top[s].contains(&i) {
                    return fail(format!("sample {s} assigned to expert {i} outside its top-k"));
                }
            }
        }
        Ok(())
    }
}

pub fn plan_expert_selection<T: Scalar>(g: &Tensor<T>, k: usize) -> Result<ExpertRoutingPlan> {
    if g.ndim() != 2 {
        return Err(shape_err("plan_expert_selection", g.shape(), &[]));
    }
    let (b, n) = (g.shape()[0], g.shape()[1]);
    plan_expert_selection_values(&g.to_f64_vec(), b, n, k)
}

pub fn plan_expert_selection_values(g: &[f64], b: usize, n: usize, k: usize) -> Result<ExpertRoutingPlan> {
    if g.len() != b * n {
        return Err(shape_err("plan_expert_selection", &[b, n], &[g.len()]));
    }
    check_k(k, n)?;
    let top: Vec<Vec<usize>> = (0..b).map(|s| top_k(&g[s * n..(s + 1) * n], k)).collect();
    let mut assignments = vec![Vec::new(); n];
    for (s, picks) in top.iter().enumerate() {
        for &i in picks {
            assignments[i].push(s);
        }
    }
    Ok(ExpertRoutingPlan {
        n,
        k,
        g: g.to_vec(),
        top,
        assignments,
    })
}

/// Routed inputs of every expert at once: `[m, l_p, d] -> [n_active, c, l_p, d]`.
pub fn gather_patches<T: Scalar>(x_patches: &Tensor<T>, plan: &DataRoutingPlan) -> Result<Tensor<T>> {
    if x_patches.ndim() != 3 || x_patches.shape()[0] != plan.m {
        return Err(shape_err("gather_patches", x_patches.shape(), &[plan.m]));
    }
    count_gather();
    let (l_p, d) = (x_patches.shape()[1], x_patches.shape()[2]);
    x_patches
        .index_select(0, &plan.flat_index())?
        .reshape(&[plan.active.len(), plan.c, l_p, d])
}

/// `base` plus every expert output written back at its patch index.
pub fn scatter_add_patches<T: Scalar>(
    base: &Tensor<T>,
    y_expert: &Tensor<T>,
    plan: &DataRoutingPlan,
) -> Result<Tensor<T>> {
    let idx = plan.flat_index();
    if base.ndim() != 3 || y_expert.numel() != idx.len() * base.numel() / base.shape()[0].max(1) {
        return Err(shape_err("scatter_add_patches", base.shape(), y_expert.shape()));
    }
    count_scatter();
    let (l_p, d) = (base.shape()[1], base.shape()[2]);
    base.index_add(0, &idx, &y_expert.reshape(&[idx.len(), l_p, d])?)
}

/// `[b, l, d] -> [Σ c_i, l, d]`, expert 0's samples first.
pub fn gather_samples<T: Scalar>(x: &Tensor<T>, plan: &ExpertRoutingPlan) -> Result<Tensor<T>> {
    if x.ndim() != 3 || x.shape()[0] != plan.top.len() {
        return Err(shape_err("gather_samples", x.shape(), &[plan.top.len()]));
    }
    count_gather();
    x.index_select(0, &plan.flat_index())
}

pub fn scatter_add_samples<T: Scalar>(base: &Tensor<T>, y: &Tensor<T>, plan: &ExpertRoutingPlan) -> Result<Tensor<T>> {
    count_scatter();
    base.index_add(0, &plan.flat_index(), y)
}

/// Consecutive dispatch rows that one expert processes for one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Unit {
    pub sample: usize,
    pub expert: usize,
    pub len: usize,
}

/// Token-level uniform encoding of a routing decision over a `[b, l, d]`
/// batch viewed as `b·l` rows.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Dispatch {
    pub l: usize,
    /// Source row of each dispatched token.
    pub rows: Vec<usize>,
    pub units: Vec<Unit>,
    /// Per dispatched token, its entry in the flattened gate tensor of the
    /// final routing stage (empty when no gate was evaluated).
    pub gate_index: Vec<usize>,
}

impl Dispatch {
    /// Every expert receives every sample, sample-major.
    pub fn full(b: usize, l: usize, n: usize) -> Self {
        let mut d = Dispatch {
            l,
            rows: Vec::with_capacity(b * n * l),
            units: Vec::with_capacity(b * n),
            gate_index: Vec::new(),
        };
        for s in 0..b {
            for i in 0..n {
                d.rows.extend(s * l..(s + 1) * l);
                d.units.push(Unit {
                    sample: s,
                    expert: i,
                    len: l,
                });
            }
        }
        d
    }

    /// One plan per sample; gates indexed as `[b·m, n]`.
    pub fn from_data_plans(plans: &[DataRoutingPlan], l: usize, l_p: usize) -> Self {
        let mut d = Dispatch {
            l,
            rows: Vec::new(),
            units: Vec::new(),
            gate_index: Vec::new(),
        };
        for (s, plan) in plans.iter().enumerate() {
            for (i, patches) in plan.id.iter().enumerate() {
                if patches.is_empty() {
                    continue;
                }
                for &j in patches {
                    d.rows.extend(s * l + j * l_p..s * l + (j + 1) * l_p);
                    let g = (s * plan.m + j) * plan.n + i;
                    d.gate_index.extend(std::iter::repeat_n(g, l_p));
                }
                d.units.push(Unit {
                    sample: s,
                    expert: i,
                    len: patches.len() * l_p,
                });
            }
        }
        d
    }

    /// Expert-major; gates indexed as `[b, n]`.
    pub fn from_expert_plan(plan: &ExpertRoutingPlan, l: usize) -> Self {
        let mut d = Dispatch {
            l,
            rows: Vec::new(),
            units: Vec::new(),
            gate_index: Vec::new(),
        };
        for (i, samples) in plan.assignments.iter().enumerate() {
            for &s in samples {
                d.rows.extend(s * l..(s + 1) * l);
                d.gate_index.extend(std::iter::repeat_n(s * plan.n + i, l));
                d.units.push(Unit {
                    sample: s,
                    expert: i,
                    len: l,
                });
            }
        }
        d
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    /// `(expert, len)` per unit, the layout of the segmented expert products.
    pub fn segments(&self) -> Vec<(usize, usize)> {
        self.units.iter().map(|u| (u.expert, u.len)).collect()
    }

    pub fn row_experts(&self) -> Vec<usize> {
        self.units
            .iter()
            .flat_map(|u| std::iter::repeat_n(u.expert, u.len))
            .collect()
    }

    /// Original in-sample position of every dispatched token.
    pub fn positions(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r % self.l).collect()
    }

    /// Position of every dispatched token inside its unit.
    pub fn compacted_positions(&self) -> Vec<usize> {
        self.units.iter().flat_map(|u| 0..u.len).collect()
    }

    /// Tokens routed to each expert.
    pub fn expert_loads(&self, n: usize) -> Vec<usize> {
        let mut loads = vec![0; n];
        for u in &self.units {
            loads[u.expert] += u.len;
        }
        loads
    }

    /// The single routed gather: `[b·l, d] -> [R, d]`.
    pub fn gather<T: Scalar>(&self, x_flat: &Tensor<T>) -> Result<Tensor<T>> {
        count_gather();
        x_flat.index_select(0, &self.rows)
    }

    /// The single routed scatter-add: `base[rows[t]] += y[t]`.
    pub fn scatter_add<T: Scalar>(&self, base_flat: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        count_scatter();
        base_flat.index_add(0, &self.rows, y)
    }

    /// Rows of `unit` as a dispatch of their own, for per-expert execution.
    pub fn restrict(&self, keep: impl Fn(&Unit) -> bool) -> Dispatch {
        let mut d = Dispatch {
            l: self.l,
            rows: Vec::new(),
            units: Vec::new(),
            gate_index: Vec::new(),
        };
        let mut start = 0;
        for u in &self.units {
            if keep(u) {
                d.rows.extend_from_slice(&self.rows[start..start + u.len]);
                if !self.gate_index.is_empty() {
                    d.gate_index.extend_from_slice(&self.gate_index[start..start + u.len]);
                }
                d.units.push(*u);
            }
            start += u.len;
        }
        d
    }
}

/// Routing hyperparameters of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteConfig {
    pub mode: SelectionMode,
    pub n: usize,
    /// Top-k of the data stage (data mode) or of the expert stage
    /// (expert and combined modes).
    pub k: usize,
    /// Top-k of the data stage in combined mode, among the active experts.
    pub k_combined_data: usize,
    pub l_p: usize,
}

/// Routing decision of one block for a batch, with the gates the balance
/// loss and gate scaling need.
#[derive(Debug, Clone)]
pub struct Routed<T: Scalar> {
    pub mode: SelectionMode,
    pub dispatch: Dispatch,
    /// `[b·m, n]` patch gates (data and combined modes).
    pub data_gates: Option<Tensor<T>>,
    pub data_plans: Vec<DataRoutingPlan>,
    /// `[b, n]` sample gates (expert and combined modes).
    pub expert_gates: Option<Tensor<T>>,
    pub expert_plan: Option<ExpertRoutingPlan>,
}

impl<T: Scalar> Routed<T> {
    /// Flattened gate tensor addressed by `dispatch.gate_index`.
    pub fn scaling_gates(&self) -> Option<Tensor<T>> {
        let g = match self.mode {
            SelectionMode::Full => return None,
            SelectionMode::Data | SelectionMode::Combined => self.data_gates.as_ref(),
            SelectionMode::Expert => self.expert_gates.as_ref(),
        }?;
        g.reshape(&[g.numel()]).ok()
    }

    /// Realized routing load per expert: first-stage patch picks in data
    /// modes, assigned samples in expert mode, tokens in full mode.
    pub fn load_counts(&self, n: usize) -> Vec<usize> {
        match self.mode {
            SelectionMode::Data | SelectionMode::Combined => {
                let mut counts = vec![0; n];
                for plan in &self.data_plans {
                    counts.iter_mut().zip(plan.stage1_counts()).for_each(|(a, b)| *a += b);
                }
                counts
            }
            SelectionMode::Expert => self.expert_plan.as_ref().map(ExpertRoutingPlan::counts).unwrap_or_default(),
            SelectionMode::Full => self.dispatch.expert_loads(n),
        }
    }

    /// Hash of every discrete routing decision.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.dispatch.hash(&mut h);
        for plan in &self.data_plans {
            plan.id_prime.hash(&mut h);
        }
        if let Some(p) = &self.expert_plan {
            p.top.hash(&mut h);
        }
        h.finish()
    }
}

/// Evaluates the gates of `x: [b, l, d]` and plans the block's dispatch.
pub fn route<T: Scalar>(x: &Tensor<T>, gate: &GateParams<T>, cfg: &RouteConfig) -> Result<Routed<T>> {
    if x.ndim() != 3 {
        return Err(shape_err("route", x.shape(), &[]));
    }
    let (b, l) = (x.shape()[0], x.shape()[1]);
    let mut routed = Routed {
        mode: cfg.mode,
        dispatch: Dispatch::full(b, l, cfg.n),
        data_gates: None,
        data_plans: Vec::new(),
        expert_gates: None,
        expert_plan: None,
    };
    if cfg.mode.uses_expert_gate() {
        let g = expert_gate(x, gate)?;
        let plan = plan_expert_selection(&g, cfg.k)?;
        routed.dispatch = Dispatch::from_expert_plan(&plan, l);
        routed.expert_gates = Some(g);
        routed.expert_plan = Some(plan);
    }
    if cfg.mode.uses_data_gate() {
        let m = check_patch_len(l, cfg.l_p)?;
        let g = data_gate_batch(x, cfg.l_p, gate.data_gate()?)?;
        let n = cfg.n;
        let all: Vec<usize> = (0..n).collect();
        let mut plans = Vec::with_capacity(b);
        for s in 0..b {
            // Plans take the `[n, m]` orientation; the batch gate is `[m, n]` per sample.
            let rows = &g.data()[s * m * n..(s + 1) * m * n];
            let values: Vec<f64> = (0..n * m).map(|t| rows[(t % m) * n + t / m].as_f64()).collect();
            let (active, k) = match &routed.expert_plan {
                Some(p) => (p.top[s].clone(), cfg.k_combined_data),
                None => (all.clone(), cfg.k),
            };
            plans.push(plan_data_selection_among(&values, n, m, k, &active)?);
        }
        routed.dispatch = Dispatch::from_data_plans(&plans, l, cfg.l_p);
        routed.data_gates = Some(g);
        routed.data_plans = plans;
    }
    Ok(routed)
}
