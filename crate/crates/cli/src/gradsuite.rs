//! Finite-difference checks over every block kind, both losses and a tiny network.

use std::sync::Arc;

use gcm_core::backbone::{l2_normalize, Embedder, EmbedderConfig, Insertion};
use gcm_core::blocks::{ContextKind, GcmBlock, GcmConfig, TransformKind};
use gcm_core::loss::{self, combined_loss, AngularProtoParams, ClassifierHead};
use gcm_core::params::{seeded, uniform, Bindings, ParamStore, Scope, StatsStore};
use gcm_core::tensor::{finite_diff_check_at, Graph, Var, DEFAULT_STEP};

use crate::config::Variant;
use crate::CliError;

pub const TOLERANCE: f64 = 1e-4;
const PROBES_PER_TENSOR: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub name: String,
    pub max_rel_err: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

fn probe_indices(n: usize) -> Vec<usize> {
    if n <= PROBES_PER_TENSOR {
        return (0..n).collect();
    }
    (0..PROBES_PER_TENSOR).map(|i| i * (n - 1) / (PROBES_PER_TENSOR - 1)).collect()
}

/// Worst relative error over every entry of `store`, each probed in turn.
/// `f` builds a scalar from bound entries and fresh statistics.
pub fn check_store<F>(store: &ParamStore, stats: &StatsStore, f: F) -> Result<f64, CliError>
where
    F: Fn(&mut Scope<'_>) -> gcm_core::Result<Var>,
{
    let mut worst = 0.0f64;
    for (name, t) in store.iter() {
        let err = finite_diff_check_at(
            |g, probe| {
                let mut b = Bindings::bind(g, store, false);
                b.rebind(name, probe)?;
                let mut st = stats.clone();
                let mut scope = Scope { g, params: &b, stats: &mut st, training: true };
                f(&mut scope)
            },
            t,
            DEFAULT_STEP,
            &probe_indices(t.numel()),
        )?;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> gcm_core::Result<Var> {
    let w = g.constant(uniform(g.shape(y), 1.0, &mut seeded(seed)));
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn block_error(variant: Variant, transform: TransformKind) -> Result<f64, CliError> {
    let (context, tfe) = match variant {
        Variant::Se => (ContextKind::Gap, false),
        Variant::AttGcm => (ContextKind::Attention, false),
        Variant::AttGcmTfe => (ContextKind::Attention, true),
        Variant::DctGcm => (ContextKind::MultiDct, false),
        Variant::DctGcmTfe => (ContextKind::MultiDct, true),
        Variant::Baseline => return Ok(0.0),
    };
    let cfg = GcmConfig {
        context,
        transform,
        tfe,
        reduction: 2,
        tfe_groups: 2,
        tfe_init: [0.6, 0.3],
        dct_grid: [2, 3],
        dct_components: 3,
        ..GcmConfig::default()
    };
    let basis = Some(Arc::new(gcm_core::dct::build_basis_set(2, 3, 3)?));
    let block = GcmBlock::new(cfg, 6, "blk", basis)?;
    let mut store = ParamStore::new();
    let mut rng = seeded(11);
    block.init(&mut store, &mut rng)?;
    store.insert("input", uniform(&[2, 6, 3, 5], 1.0, &mut rng))?;
    check_store(&store, &StatsStore::default(), |s| {
        let x = s.p("input")?;
        let y = block.forward(s, x)?;
        weighted_sum(s.g, y, 12)
    })
}

fn proto_error() -> Result<f64, CliError> {
    let mut store = ParamStore::new();
    loss::init_proto(&mut store)?;
    store.insert("emb", uniform(&[3, 2, 4], 1.0, &mut seeded(21)))?;
    check_store(&store, &StatsStore::default(), |s| {
        let p = AngularProtoParams { w: s.p("proto.w")?, b: s.p("proto.b")? };
        let e = s.p("emb")?;
        loss::angular_proto_loss(s.g, e, &p)
    })
}

fn ce_error() -> Result<f64, CliError> {
    let mut store = ParamStore::new();
    let mut rng = seeded(22);
    loss::init_head(&mut store, 3, 4, &mut rng)?;
    store.insert("emb", uniform(&[5, 4], 1.0, &mut rng))?;
    check_store(&store, &StatsStore::default(), |s| {
        let h = ClassifierHead { weight: s.p("head.weight")?, bias: s.p("head.bias")? };
        let e = s.p("emb")?;
        loss::softmax_ce_loss(s.g, e, &[0, 2, 1, 1, 0], &h)
    })
}

fn combined_error() -> Result<f64, CliError> {
    let mut store = ParamStore::new();
    let mut rng = seeded(23);
    loss::init_head(&mut store, 3, 4, &mut rng)?;
    loss::init_proto(&mut store)?;
    store.insert("emb", uniform(&[6, 4], 1.0, &mut rng))?;
    check_store(&store, &StatsStore::default(), |s| {
        let h = loss::bind_head(s)?;
        let p = loss::bind_proto(s)?;
        let e = s.p("emb")?;
        let unit = l2_normalize(s.g, e)?;
        let grouped = s.g.reshape(unit, &[3, 2, 4])?;
        Ok(combined_loss(s.g, grouped, e, &[0, 0, 1, 1, 2, 2], &h, &p)?.total)
    })
}

/// Tiny embedder with attention blocks and TFE, trained objective end to end.
pub fn tiny_network_config() -> EmbedderConfig {
    EmbedderConfig {
        n_mels: 6,
        channels: vec![2, 4],
        blocks_per_stage: vec![1, 1],
        embedding_dim: 4,
        asp_hidden: 3,
        insertion: Insertion::AfterBn,
        gcm: Some(GcmConfig { tfe: true, tfe_groups: 2, tfe_init: [0.5, 0.5], reduction: 2, ..GcmConfig::default() }),
        ..EmbedderConfig::default()
    }
}

fn network_error() -> Result<f64, CliError> {
    let model = Embedder::new(tiny_network_config())?;
    let mut rng = seeded(31);
    let (mut store, stats) = model.init(&mut rng)?;
    loss::init_head(&mut store, 3, 4, &mut rng)?;
    loss::init_proto(&mut store)?;
    store.insert("input", uniform(&[6, 1, 6, 5], 1.0, &mut rng))?;
    check_store(&store, &stats, |s| {
        let x = s.p("input")?;
        let raw = model.forward(s, x)?;
        let h = loss::bind_head(s)?;
        let p = loss::bind_proto(s)?;
        let unit = l2_normalize(s.g, raw)?;
        let grouped = s.g.reshape(unit, &[3, 2, 4])?;
        Ok(combined_loss(s.g, grouped, raw, &[0, 0, 1, 1, 2, 2], &h, &p)?.total)
    })
}

fn corrupted_rule_error() -> Result<f64, CliError> {
    let x = uniform(&[5], 1.0, &mut seeded(41));
    let all: Vec<usize> = (0..5).collect();
    Ok(finite_diff_check_at(
        |g, x| {
            let y = g.pointwise(x, f64::sin, |v| 1.5 * v.cos())?;
            g.sum_all(y)
        },
        &x,
        DEFAULT_STEP,
        &all,
    )?)
}

/// One row per block kind (worst over both channel transforms), per loss, and
/// for the tiny network. `inject_fault` appends a fixture whose derivative rule
/// is deliberately wrong.
pub fn run_suite(inject_fault: bool) -> Result<Vec<GradRow>, CliError> {
    let mut rows = Vec::new();
    for v in Variant::BLOCKS {
        let e = block_error(v, TransformKind::Fc)?.max(block_error(v, TransformKind::Eca)?);
        rows.push(GradRow { name: format!("block:{}", v.name()), max_rel_err: e });
    }
    rows.push(GradRow { name: "loss:angular_proto".into(), max_rel_err: proto_error()? });
    rows.push(GradRow { name: "loss:softmax_ce".into(), max_rel_err: ce_error()? });
    rows.push(GradRow { name: "loss:combined".into(), max_rel_err: combined_error()? });
    rows.push(GradRow { name: "network:toy".into(), max_rel_err: network_error()? });
    if inject_fault {
        rows.push(GradRow { name: "fixture:corrupted_rule".into(), max_rel_err: corrupted_rule_error()? });
    }
    Ok(rows)
}

pub fn format_table(rows: &[GradRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        s.push_str(&format!("{:<24} {:>12.3e} {status}\n", r.name, r.max_rel_err));
    }
    s
}
