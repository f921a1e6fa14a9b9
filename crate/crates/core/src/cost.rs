//! Analytic FLOP and parameter counting over a shape-only forward graph.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use vpnext_tensor::{numel, Graph, OpKind, OpRecord, Scalar};

use crate::error::{ModelError, Result};
use crate::model::{Model, Phase, AUX_PREFIX};

/// How one op kind is charged.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Rule {
    Free,
    PerOutput(u64),
    PerInput(u64),
    /// `2·m·k·n` for matmul, linear and batched matmul; bias is not charged.
    Dense,
    /// `2·kh·kw·cin·cout` per output position.
    Conv,
}

#[derive(Clone, Debug)]
pub struct CostRules {
    rules: HashMap<OpKind, Rule>,
}

impl Default for CostRules {
    fn default() -> Self {
        use OpKind::*;
        let rules = OpKind::ALL
            .iter()
            .map(|&k| {
                let r = match k {
                    Leaf | Detach | Reshape | Permute | Concat | SubsampleGrid | RepeatLeading => Rule::Free,
                    MatMul | Linear | BatchMatMul => Rule::Dense,
                    Conv2d => Rule::Conv,
                    BilinearSample | ResizeBilinear => Rule::PerOutput(8),
                    Gelu | LayerNorm => Rule::PerOutput(8),
                    Softmax | LogSoftmax => Rule::PerOutput(5),
                    Add | Sub | Mul | Div | Scale | AddScalar | Exp | Ln | Powf => Rule::PerOutput(1),
                    Sum | Mean | SumAxis => Rule::PerInput(1),
                    MseMean => Rule::PerInput(3),
                };
                (k, r)
            })
            .collect();
        CostRules { rules }
    }
}

impl CostRules {
    /// Rules without any entries; every op is then unsupported.
    pub fn empty() -> Self {
        CostRules { rules: HashMap::new() }
    }

    pub fn set(&mut self, kind: OpKind, rule: Rule) {
        self.rules.insert(kind, rule);
    }

    pub fn remove(&mut self, kind: OpKind) {
        self.rules.remove(&kind);
    }

    pub fn flops(&self, rec: &OpRecord<'_>) -> Result<u64> {
        let rule = self.rules.get(&rec.kind).ok_or_else(|| ModelError::UnsupportedOp(rec.kind.name().into()))?;
        let out = numel(rec.output) as u64;
        Ok(match *rule {
            Rule::Free => 0,
            Rule::PerOutput(c) => c * out,
            Rule::PerInput(c) => c * numel(rec.inputs[0]) as u64,
            Rule::Dense => {
                let a = rec.inputs[0];
                let k = match rec.kind {
                    OpKind::Linear => rec.inputs[1][0],
                    _ => a[a.len() - 1],
                };
                2 * out * k as u64
            }
            Rule::Conv => {
                let kr = rec.inputs[1];
                let positions = out / kr[3] as u64;
                2 * (kr[0] * kr[1] * kr[2] * kr[3]) as u64 * positions
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModuleCost {
    pub module: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CostReport {
    pub input_size: usize,
    pub phase: String,
    pub flops: u64,
    pub params: u64,
    pub breakdown: Vec<ModuleCost>,
    pub by_kind: BTreeMap<String, u64>,
}

impl CostReport {
    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.breakdown.iter().find(|m| m.module == name)
    }

    pub fn module_flops(&self, name: &str) -> u64 {
        self.module(name).map_or(0, |m| m.flops)
    }

    pub fn kind_flops(&self, kind: OpKind) -> u64 {
        self.by_kind.get(kind.name()).copied().unwrap_or(0)
    }
}

fn top_level(path: &str, sep: char) -> &str {
    path.split(sep).next().unwrap_or(path)
}

/// Charges every recorded op of `g`, grouped by top-level scope and by kind.
pub fn count_graph<T: Scalar>(
    g: &Graph<T>,
    rules: &CostRules,
) -> Result<(BTreeMap<String, u64>, BTreeMap<String, u64>)> {
    let mut by_scope = BTreeMap::new();
    let mut by_kind = BTreeMap::new();
    for rec in g.records() {
        let f = rules.flops(&rec)?;
        if f == 0 {
            continue;
        }
        *by_scope.entry(top_level(rec.scope, '/').to_string()).or_insert(0) += f;
        *by_kind.entry(rec.kind.name().to_string()).or_insert(0) += f;
    }
    Ok((by_scope, by_kind))
}

/// Cost of one forward pass on a single `input_size`² image.
pub fn count_cost<T: Scalar>(model: &Model<T>, input_size: usize, phase: Phase) -> Result<CostReport> {
    count_cost_with(model, input_size, phase, &CostRules::default())
}

pub fn count_cost_with<T: Scalar>(
    model: &Model<T>,
    input_size: usize,
    phase: Phase,
    rules: &CostRules,
) -> Result<CostReport> {
    count_cost_rect(model, input_size, input_size, phase, rules)
}

/// As [`count_cost_with`] for a `height × width` input.
pub fn count_cost_rect<T: Scalar>(
    model: &Model<T>,
    height: usize,
    width: usize,
    phase: Phase,
    rules: &CostRules,
) -> Result<CostReport> {
    let mut g = Graph::<T>::shape_only();
    let p = model.bind(&mut g, phase == Phase::Train);
    let img = g.placeholder(&[1, height, width, 3], false)?;
    model.forward(&mut g, &p, img, phase)?;
    let (by_scope, by_kind) = count_graph(&g, rules)?;

    let mut params: BTreeMap<String, u64> = BTreeMap::new();
    for (name, t) in model.params().iter() {
        if phase == Phase::Inference && name.starts_with(AUX_PREFIX) {
            continue;
        }
        *params.entry(top_level(name, '.').to_string()).or_insert(0) += t.len() as u64;
    }
    let mut modules: Vec<String> = params.keys().chain(by_scope.keys()).cloned().collect();
    modules.sort();
    modules.dedup();
    let breakdown: Vec<ModuleCost> = modules
        .into_iter()
        .map(|m| ModuleCost {
            flops: by_scope.get(&m).copied().unwrap_or(0),
            params: params.get(&m).copied().unwrap_or(0),
            module: m,
        })
        .collect();
    Ok(CostReport {
        input_size: height.max(width),
        phase: phase.name().into(),
        flops: breakdown.iter().map(|m| m.flops).sum(),
        params: breakdown.iter().map(|m| m.params).sum(),
        breakdown,
        by_kind,
    })
}

/// Global self-attention over an `h × w` grid with width `d`: four `d×d`
/// projections plus the two `(hw)²·d` products.
pub fn attention_reference_flops(h: usize, w: usize, d: usize) -> u64 {
    let t = (h * w) as u64;
    let d = d as u64;
    4 * 2 * t * d * d + 2 * 2 * t * t * d
}

/// One deformable HiCLR step at an `h × w` grid with high-level width `d`,
/// fuse width `f` and kernel `k`: resize, offset prediction, sampling,
/// contraction and the residual tail.
pub fn hiclr_step_reference_flops(h: usize, w: usize, d: usize, f: usize, k: usize) -> u64 {
    let (hw, d, f, kk) = ((h * w) as u64, d as u64, f as u64, (k * k) as u64);
    let resize = 8 * hw * d;
    let offsets = 2 * kk * d * 2 * kk * hw;
    let grid = hw * kk * 2;
    let sample = 8 * hw * kk * (f + d);
    let contract = 2 * hw * kk * (f + d) * f;
    let tail = (8 + 1 + 8) * hw * f;
    resize + offsets + grid + sample + contract + tail
}
