//! Sweep rows and their CSV form.

use std::fmt::Write as _;

use serde::Serialize;

use crate::attention::{build_attention, AttentionVariant, KernelSpec};
use crate::cost::{attention_flops_analytic, attention_params_analytic, model_cost};
use crate::error::{Error, Result};
use crate::init;
use crate::tensor::{Shape, Tensor};
use crate::timing::{self, TimingStats};
use crate::van::{Capacity, ModelConfig};

pub const CSV_HEADER: &str =
    "variant,k,d,channels_or_capacity,params,macs,gflops,wall_ms_mean,wall_ms_stddev,reps,seed";

/// What a row is costed over: a bare attention module with `C` channels,
/// or a whole backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Scope {
    Channels(usize),
    Capacity(Capacity),
}

impl Scope {
    fn label(&self) -> String {
        match self {
            Scope::Channels(c) => c.to_string(),
            Scope::Capacity(c) => c.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub variant: AttentionVariant,
    pub k: usize,
    /// `None` for the trivial designs, which have no dilation.
    pub d: Option<usize>,
    pub scope: Scope,
    pub params: u64,
    pub macs: u64,
    pub timing: Option<TimingStats>,
    pub seed: u64,
}

impl SweepRow {
    pub fn gflops(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    fn csv_line(&self) -> String {
        let d = self.d.map(|d| d.to_string()).unwrap_or_default();
        let (mean, sd, reps) = match &self.timing {
            Some(t) => (sig6(t.mean_ms), sig6(t.stddev_ms), t.reps.to_string()),
            None => Default::default(),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.variant,
            self.k,
            d,
            self.scope.label(),
            self.params,
            self.macs,
            sig6(self.gflops()),
            mean,
            sd,
            reps,
            self.seed
        )
    }
}

/// Cost one `(variant, k, d)` point. Module scope uses the bare attention
/// module at `hw x hw`; capacity scope walks the full backbone at
/// `hw x hw`. With `bench_reps`, the attention module forward is timed at
/// its working size: `C x hw x hw`, or `C_1 x hw/4 x hw/4` for a backbone.
pub fn sweep_row(
    variant: AttentionVariant,
    spec: KernelSpec,
    scope: Scope,
    hw: usize,
    seed: u64,
    bench_reps: Option<usize>,
) -> Result<SweepRow> {
    let (params, macs, bench_c, bench_hw) = match scope {
        Scope::Channels(c) => (
            attention_params_analytic(variant, spec, c)?,
            attention_flops_analytic(variant, spec, c, hw, hw)?,
            c,
            hw,
        ),
        Scope::Capacity(cap) => {
            let cfg = ModelConfig::new(cap, variant, spec).with_seed(seed);
            let r = model_cost(&cfg, hw, hw)?;
            (r.params, r.macs, cfg.stages[0].channels, hw / 4)
        }
    };
    spec.validate(variant)?;
    let timing = match bench_reps {
        Some(reps) => Some(bench_module(variant, spec, bench_c, bench_hw, reps, seed)?),
        None => None,
    };
    Ok(SweepRow {
        variant,
        k: spec.k,
        d: (!variant.is_trivial()).then_some(spec.d),
        scope,
        params,
        macs,
        timing,
        seed,
    })
}

/// Forward wall time of one seeded attention module on a `1 x C x hw x hw`
/// input.
pub fn bench_module(
    variant: AttentionVariant,
    spec: KernelSpec,
    channels: usize,
    hw: usize,
    reps: usize,
    seed: u64,
) -> Result<TimingStats> {
    if hw == 0 || channels == 0 {
        return Err(Error::Config("benchmark needs positive channels and size".into()));
    }
    let m = build_attention(variant, spec, channels, seed)?;
    let x = Tensor::uniform(Shape::new(1, channels, hw, hw), 1.0, &mut init::rng(seed));
    m.forward(&x)?;
    Ok(timing::bench(reps, || m.forward(&x)))
}

/// Rows sorted by `(variant, k)` under the CSV header; LF line endings.
pub fn rows_to_csv(rows: &[SweepRow]) -> String {
    let mut sorted: Vec<&SweepRow> = rows.iter().collect();
    sorted.sort_by_key(|r| (r.variant, r.k));
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER}");
    for r in sorted {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Six significant digits, trailing zeros dropped; scientific notation
/// below `1e-4` and from `1e15` up.
pub fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap_or((&sci, "0"));
    let exp: i32 = exp.parse().unwrap_or(0);
    if !(-4..15).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let rounded: f64 = sci.parse().unwrap_or(v);
    trim_zeros(&format!("{:.*}", (5 - exp).max(0) as usize, rounded)).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}
