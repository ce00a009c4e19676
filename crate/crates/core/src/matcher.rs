//! Attentional message passing over vertex nodes, output heads, the
//! dustbin-augmented score matrix and Sinkhorn normalization.

use serde::{Deserialize, Serialize};

use crate::autodiff::nn::{Linear, Mlp};
use crate::autodiff::{CustomOp, Initializer, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::ElementClass;
use crate::graph::{row_mask, GraphState};
use crate::tensor::Tensor;

/// Value given to the diagonal of the score matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagMode {
    /// `-1e4`: no self-assignment mass survives normalization.
    LargeNegative,
    /// Literal zero.
    Zero,
}

impl DiagMode {
    pub fn value(self) -> f64 {
        match self {
            DiagMode::LargeNegative => -1e4,
            DiagMode::Zero => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// `<f_i, f_j> / sqrt(D)`.
    ScaledDot,
    /// `<f_i, f_j> / (|f_i| |f_j|)`.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatcherConfig {
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub sinkhorn_iters: usize,
    pub diag_mode: DiagMode,
    pub score_mode: ScoreMode,
    pub dustbin_init: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            dim: 64,
            heads: 4,
            layers: 7,
            sinkhorn_iters: 100,
            diag_mode: DiagMode::LargeNegative,
            score_mode: ScoreMode::ScaledDot,
            dustbin_init: 1.0,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.sinkhorn_iters == 0 {
            return Err(Error::Config("sinkhorn_iters must be at least 1".into()));
        }
        if !self.dustbin_init.is_finite() {
            return Err(Error::Config("dustbin_init must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub merge: Linear,
    pub mlp: Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matcher {
    pub cfg: MatcherConfig,
    pub layers: Vec<LayerParams>,
    pub cls: Mlp,
    pub matching: Mlp,
    pub dustbin: String,
}

/// Outputs of one matcher pass.
#[derive(Clone, Debug)]
pub struct MatcherOutput {
    /// `(N, 3)`, zero on masked rows.
    pub class_logits: Var,
    /// `(N, D)`, zero on masked rows.
    pub embeddings: Var,
    /// `(N+1, N+1)` pre-normalization scores.
    pub scores: Var,
    /// `(N+1, N+1)` soft adjacency, zero on masked rows and columns.
    pub adjacency: Var,
}

impl Matcher {
    pub fn new(cfg: &MatcherConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("gnn.layer{l}");
                LayerParams {
                    query: Linear::new(&format!("{p}.query"), d, d),
                    key: Linear::new(&format!("{p}.key"), d, d),
                    value: Linear::new(&format!("{p}.value"), d, d),
                    merge: Linear::new(&format!("{p}.merge"), d, d),
                    mlp: Mlp::new(&format!("{p}.mlp"), 2 * d, 2 * d, d),
                }
            })
            .collect();
        Ok(Matcher {
            cfg: cfg.clone(),
            layers,
            cls: Mlp::new("gnn.cls", d, d, ElementClass::COUNT),
            matching: Mlp::new("gnn.match", d, d, d),
            dustbin: "gnn.dustbin".into(),
        })
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Initializer) -> Result<()> {
        for l in &self.layers {
            l.query.init(store, init)?;
            l.key.init(store, init)?;
            l.value.init(store, init)?;
            l.merge.init(store, init)?;
            l.mlp.init(store, init)?;
        }
        self.cls.init(store, init)?;
        self.matching.init(store, init)?;
        store.insert(self.dustbin.clone(), Tensor::full(&[1, 1], self.cfg.dustbin_init))
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.layers {
            for lin in [&l.query, &l.key, &l.value, &l.merge, &l.mlp.fc1, &l.mlp.fc2] {
                out.push(lin.weight.clone());
                out.push(lin.bias.clone());
            }
        }
        for m in [&self.cls, &self.matching] {
            out.extend(m.param_names().iter().map(|s| s.to_string()));
        }
        out.push(self.dustbin.clone());
        out
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, layer: &LayerParams, g: Var, key_mask: &[bool]) -> Result<Var> {
        let q = layer.query.forward(tape, store, g)?;
        let k = layer.key.forward(tape, store, g)?;
        let v = layer.value.forward(tape, store, g)?;
        let dh = self.cfg.dim / self.cfg.heads;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let logits = tape.matmul_nt(qh, kh)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt())?;
            let logits = tape.masked_fill(logits, key_mask, -1e30)?;
            let attn = tape.softmax(logits, 1)?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        layer.merge.forward(tape, store, cat)
    }

    /// Residual layers `G + MLP([G | MSA(G)])`, with masked keys excluded
    /// from attention and masked rows re-zeroed after every layer.
    pub fn message_passing(&self, tape: &mut Tape, store: &ParamStore, state: &GraphState) -> Result<GraphState> {
        let n = state.mask.len();
        if !state.mask.iter().any(|&m| m) {
            return Err(Error::EmptyGraph);
        }
        let key_mask: Vec<bool> = (0..n * n).map(|i| !state.mask[i % n]).collect();
        let rows = row_mask(&state.mask, self.cfg.dim);
        let mut g = state.embeddings;
        for layer in &self.layers {
            let msg = self.attention(tape, store, layer, g, &key_mask)?;
            let cat = tape.concat(&[g, msg], 1)?;
            let delta = layer.mlp.forward(tape, store, cat)?;
            let next = tape.add(g, delta)?;
            g = tape.mul_const(next, &rows)?;
        }
        Ok(GraphState {
            embeddings: g,
            mask: state.mask.clone(),
            layer: state.layer + self.layers.len(),
        })
    }

    /// Class logits and matching embeddings, zero on masked rows.
    pub fn heads(&self, tape: &mut Tape, store: &ParamStore, state: &GraphState) -> Result<(Var, Var)> {
        let l = self.cls.forward(tape, store, state.embeddings)?;
        let l = tape.mul_const(l, &row_mask(&state.mask, ElementClass::COUNT))?;
        let f = self.matching.forward(tape, store, state.embeddings)?;
        let f = tape.mul_const(f, &row_mask(&state.mask, self.cfg.dim))?;
        Ok((l, f))
    }

    pub fn score_matrix(&self, tape: &mut Tape, store: &ParamStore, f: Var, mask: &[bool]) -> Result<Var> {
        let alpha = tape.param(&self.dustbin, store.get(&self.dustbin)?);
        score_matrix(tape, f, alpha, mask, self.cfg.diag_mode, self.cfg.score_mode)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, state: &GraphState) -> Result<MatcherOutput> {
        let out = self.message_passing(tape, store, state)?;
        let (class_logits, embeddings) = self.heads(tape, store, &out)?;
        let scores = self.score_matrix(tape, store, embeddings, &state.mask)?;
        let adjacency = sinkhorn(tape, scores, &state.mask, self.cfg.sinkhorn_iters)?;
        Ok(MatcherOutput {
            class_logits,
            embeddings,
            scores,
            adjacency,
        })
    }
}

/// `(N+1, N+1)` scores: pairwise similarities with the diagonal forced,
/// bordered by a dustbin row and column holding `alpha` (shape `[1, 1]`).
/// Entries touching a masked node are set to `-1e4`.
pub fn score_matrix(
    tape: &mut Tape,
    f: Var,
    alpha: Var,
    mask: &[bool],
    diag: DiagMode,
    mode: ScoreMode,
) -> Result<Var> {
    let (n, d) = tape.value(f).dims2()?;
    if mask.len() != n {
        return Err(Error::shape("score_matrix", format!("mask {} for {n} nodes", mask.len())));
    }
    if tape.shape(alpha) != [1, 1] {
        return Err(Error::shape("score_matrix", format!("alpha {:?}", tape.shape(alpha))));
    }
    let s = match mode {
        ScoreMode::ScaledDot => {
            let s = tape.matmul_nt(f, f)?;
            tape.scale(s, 1.0 / (d as f64).sqrt())?
        }
        ScoreMode::Cosine => {
            let sq = tape.mul(f, f)?;
            let norm2 = tape.sum_axis(sq, 1)?;
            let norm2 = tape.reshape(norm2, &[n, 1])?;
            let norm2 = tape.add_scalar(norm2, 1e-12)?;
            let log = tape.ln(norm2)?;
            let log = tape.scale(log, -0.5)?;
            let inv = tape.exp(log)?;
            let ones = tape.constant(Tensor::full(&[1, d], 1.0));
            let inv = tape.matmul(inv, ones)?;
            let unit = tape.mul(f, inv)?;
            tape.matmul_nt(unit, unit)?
        }
    };
    let diag_mask: Vec<bool> = (0..n * n).map(|i| i / n == i % n).collect();
    let s = tape.masked_fill(s, &diag_mask, diag.value())?;
    let col_ones = tape.constant(Tensor::full(&[n, 1], 1.0));
    let col = tape.matmul(col_ones, alpha)?;
    let s = tape.concat(&[s, col], 1)?;
    let row_ones = tape.constant(Tensor::full(&[1, 1], 1.0));
    let row_one = tape.matmul(row_ones, alpha)?;
    let row_rest = tape.constant(Tensor::full(&[1, n], 1.0));
    let row_rest = tape.matmul(alpha, row_rest)?;
    let row = tape.concat(&[row_rest, row_one], 1)?;
    let s = tape.concat(&[s, row], 0)?;
    let m = n + 1;
    let pad: Vec<bool> = (0..m * m)
        .map(|i| {
            let (r, c) = (i / m, i % m);
            (r < n && !mask[r]) || (c < n && !mask[c])
        })
        .collect();
    tape.masked_fill(s, &pad, -1e4)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Log-domain Sinkhorn iterates over valid entries of an `(N+1, N+1)`
/// score matrix whose last row and column are the dustbin.
#[derive(Clone, Debug)]
pub struct SinkhornState {
    pub m: usize,
    pub valid: Vec<bool>,
    pub log_marginal: Vec<f64>,
    /// `u[t]`, `v[t]` after iteration `t` (index 0 is the zero start).
    pub u: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Forward Sinkhorn; returns the normalized matrix (zeros on invalid
/// entries) together with all dual iterates.
pub fn sinkhorn_forward(scores: &Tensor, mask: &[bool], iters: usize) -> Result<(Tensor, SinkhornState)> {
    let (m, m2) = scores.dims2()?;
    if m != m2 || mask.len() + 1 != m {
        return Err(Error::shape("sinkhorn", format!("{m}x{m2} with mask {}", mask.len())));
    }
    if iters == 0 {
        return Err(Error::Config("sinkhorn needs at least one iteration".into()));
    }
    let n_valid = mask.iter().filter(|&&b| b).count();
    if n_valid == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut valid = mask.to_vec();
    valid.push(true);
    let log_marginal: Vec<f64> = (0..m)
        .map(|i| if i + 1 == m { (n_valid as f64).ln() } else { 0.0 })
        .collect();
    let s = scores.data();
    let rows: Vec<usize> = (0..m).filter(|&i| valid[i]).collect();
    let mut u = vec![vec![0.0; m]];
    let mut v = vec![vec![0.0; m]];
    for _ in 0..iters {
        let vp = v.last().unwrap();
        let mut un = vec![0.0; m];
        for &i in &rows {
            un[i] = log_marginal[i] - log_sum_exp(rows.iter().map(|&j| s[i * m + j] + vp[j]));
        }
        let mut vn = vec![0.0; m];
        for &j in &rows {
            vn[j] = log_marginal[j] - log_sum_exp(rows.iter().map(|&i| s[i * m + j] + un[i]));
        }
        u.push(un);
        v.push(vn);
    }
    let (uf, vf) = (u.last().unwrap(), v.last().unwrap());
    let mut out = vec![0.0; m * m];
    for &i in &rows {
        for &j in &rows {
            out[i * m + j] = (s[i * m + j] + uf[i] + vf[j]).exp();
        }
    }
    let state = SinkhornState {
        m,
        valid,
        log_marginal,
        u,
        v,
    };
    Ok((Tensor::raw(vec![m, m], out), state))
}

/// Backward through every unrolled iteration, replaying the stored duals.
pub fn sinkhorn_backward(scores: &Tensor, state: &SinkhornState, output: &Tensor, grad: &Tensor) -> Tensor {
    let m = state.m;
    let s = scores.data();
    let a = output.data();
    let g = grad.data();
    let rows: Vec<usize> = (0..m).filter(|&i| state.valid[i]).collect();
    let mut gs = vec![0.0; m * m];
    let mut gu = vec![0.0; m];
    let mut gv = vec![0.0; m];
    for &i in &rows {
        for &j in &rows {
            let gl = g[i * m + j] * a[i * m + j];
            gs[i * m + j] += gl;
            gu[i] += gl;
            gv[j] += gl;
        }
    }
    let iters = state.u.len() - 1;
    let mut col = vec![0.0; m];
    for t in (1..=iters).rev() {
        // v_t[j] = log b_j - LSE_i(S_ij + u_t[i])
        let (ut, vt) = (&state.u[t], &state.v[t]);
        let mut gu_acc = gu.clone();
        for &j in &rows {
            if gv[j] == 0.0 {
                continue;
            }
            for &i in &rows {
                // column softmax weight: exp(S_ij + u_i + v_j - log b_j)
                col[i] = (s[i * m + j] + ut[i] + vt[j] - state.log_marginal[j]).exp();
            }
            for &i in &rows {
                let w = col[i] * gv[j];
                gs[i * m + j] -= w;
                gu_acc[i] -= w;
            }
        }
        // u_t[i] = log a_i - LSE_j(S_ij + v_{t-1}[j])
        let vp = &state.v[t - 1];
        let mut gv_prev = vec![0.0; m];
        for &i in &rows {
            if gu_acc[i] == 0.0 {
                continue;
            }
            for &j in &rows {
                let w = (s[i * m + j] + ut[i] + vp[j] - state.log_marginal[i]).exp() * gu_acc[i];
                gs[i * m + j] -= w;
                gv_prev[j] -= w;
            }
        }
        gu = vec![0.0; m];
        gv = gv_prev;
    }
    Tensor::raw(vec![m, m], gs)
}

struct SinkhornOp {
    state: SinkhornState,
}

impl CustomOp for SinkhornOp {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(sinkhorn_backward(inputs[0], &self.state, output, grad))]
    }
}

/// Normalizes `exp(scores)` to unit marginals on real nodes and `N_valid`
/// on the dustbin, ignoring rows and columns of masked nodes.
pub fn sinkhorn(tape: &mut Tape, scores: Var, mask: &[bool], iters: usize) -> Result<Var> {
    let (out, state) = sinkhorn_forward(tape.value(scores), mask, iters)?;
    tape.custom(&[scores], out, Box::new(SinkhornOp { state }))
}
