//! Structure-only cost model: parameters, multiply-accumulates, FLOPs under
//! both common conventions, auxiliary operation counts and a block-level
//! activation-memory estimate.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::encoder::Encoder;
use crate::error::Result;
use crate::model::LightMedSeg;
use crate::nn::{Cost, Extents};
use crate::router::SkipSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub module: String,
    pub params: usize,
    pub macs: u64,
    /// FLOPs counting one multiply-accumulate as two operations.
    pub flops_mac2: u64,
    /// FLOPs counting one multiply-accumulate as one operation.
    pub flops_mac1: u64,
    /// Normalization, activation, resampling, pooling and elementwise ops;
    /// excluded from the headline FLOP figures.
    pub aux_ops: u64,
    /// Bytes of the block's output activations.
    pub activ_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub tensor: String,
    /// Positive for an allocation, negative for a release.
    pub bytes: i64,
    pub live_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_shape: [usize; 5],
    pub precision_bytes: usize,
    pub fingerprint: String,
    pub config: ModelConfig,
    pub rows: Vec<CostRow>,
    pub total_params: usize,
    pub total_macs: u64,
    pub total_flops_mac2: u64,
    pub total_flops_mac1: u64,
    pub total_aux_ops: u64,
    /// Peak of simultaneously live block-level activations. An analytical
    /// estimate only; framework-measured peaks include workspaces and
    /// gradient buffers that this ledger ignores.
    pub activation_peak_bytes: u64,
    pub ledger: Vec<LedgerEvent>,
}

/// Hex SHA-256 prefix of the config's canonical JSON.
pub fn fingerprint(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

struct Liveness {
    live: u64,
    peak: u64,
    sizes: Vec<(String, u64)>,
    events: Vec<LedgerEvent>,
}

impl Liveness {
    fn new() -> Self {
        Self {
            live: 0,
            peak: 0,
            sizes: Vec::new(),
            events: Vec::new(),
        }
    }

    fn alloc(&mut self, name: impl Into<String>, bytes: u64) {
        let name = name.into();
        self.live += bytes;
        self.peak = self.peak.max(self.live);
        self.events.push(LedgerEvent {
            tensor: name.clone(),
            bytes: bytes as i64,
            live_after: self.live,
        });
        self.sizes.push((name, bytes));
    }

    fn free(&mut self, name: &str) {
        let Some(pos) = self.sizes.iter().position(|(n, _)| n == name) else {
            return;
        };
        let (name, bytes) = self.sizes.remove(pos);
        self.live -= bytes;
        self.events.push(LedgerEvent {
            tensor: name,
            bytes: -(bytes as i64),
            live_after: self.live,
        });
    }
}

impl CostReport {
    /// Walks the model structure for an input of `shape` without running it.
    pub fn analyze(model: &LightMedSeg, shape: [usize; 5], precision_bytes: usize) -> Result<Self> {
        let cfg = &model.config;
        cfg.check_input(&shape)?;
        let reg = model.registry()?;
        let [b, cin, d, h, w] = shape;
        let ext: Extents = [d, h, w];
        let bytes = |c: usize, e: Extents| (b * c * e.iter().product::<usize>() * precision_bytes) as u64;
        let mut rows: Vec<CostRow> = Vec::new();
        let mut push = |module: String, cost: Cost, activ: u64| {
            rows.push(CostRow {
                params: reg.count_prefix(&module),
                module,
                macs: cost.macs,
                flops_mac2: 2 * cost.macs,
                flops_mac1: cost.macs,
                aux_ops: cost.aux,
                activ_bytes: activ,
            });
        };
        let mut live = Liveness::new();
        let c0 = cfg.stem_channels;

        live.alloc("input", bytes(cin, ext));
        let se = model.stem.out_extents(ext);
        push("stem".into(), model.stem.cost(b, ext), bytes(c0, se));
        live.alloc("stem", bytes(c0, se));
        if let Some(det) = &model.detector {
            push("anchors".into(), det.cost(b, ext), (b * cfg.anchors * 3 * precision_bytes) as u64);
            live.alloc("anchors", (b * cfg.anchors * 3 * precision_bytes) as u64);
        }
        live.free("input");
        live.alloc("texture", bytes(1, se));
        if let Some(l) = &model.lspm {
            let [t, g, m] = l.branch_costs(b, se);
            push("lspm.texture".into(), t, bytes(1, se));
            push("lspm.gate".into(), g, bytes(3, se));
            push("lspm.mix".into(), m, bytes(c0, se));
            live.alloc("lspm.mixed", bytes(c0, se));
        }

        let skip_ext = Encoder::skip_extents(se);
        let mut input = se;
        let mut prev = if model.lspm.is_some() { "lspm.mixed" } else { "" }.to_string();
        for (i, st) in model.encoder.stages.iter().enumerate() {
            let e = skip_ext[i];
            let name = format!("encoder.stage{}", i + 1);
            push(name.clone(), st.cost(b, input, se), bytes(st.cout, e));
            live.alloc(format!("E{}", i + 1), bytes(st.cout, e));
            if st.pool {
                live.alloc(format!("pooled{}", i + 1), bytes(st.cout, e.map(|n| n / 2)));
            }
            if !prev.is_empty() {
                live.free(&prev);
            }
            prev = if st.pool { format!("pooled{}", i + 1) } else { String::new() };
            input = e.map(|n| if st.pool { n / 2 } else { n });
        }
        live.free("texture");

        let plan: Vec<SkipSource> = model.decoder.iter().map(|s| s.source).collect();
        let consumed_by_decoder = |i: usize| plan.contains(&SkipSource::Encoder(i));
        let rw = cfg.router_width;
        let mut router_cost = Cost::default();
        if let Some(r) = &model.router {
            router_cost += r.align_cost(b, &skip_ext);
            for (i, &e) in skip_ext.iter().enumerate() {
                live.alloc(format!("aligned{}", i + 1), bytes(rw, e));
            }
            for i in 2..=4 {
                if !consumed_by_decoder(i) && i != 4 {
                    live.free(&format!("E{i}"));
                }
            }
        }

        let bottleneck_ext = skip_ext[3];
        let bw = cfg.decoder_widths()[0];
        push(
            "decoder.bottleneck".into(),
            Cost::macs(model.bottleneck.macs(b, bottleneck_ext)),
            bytes(bw, bottleneck_ext),
        );
        live.alloc("bottleneck", bytes(bw, bottleneck_ext));
        if !consumed_by_decoder(4) {
            live.free("E4");
        }
        let mut cur = bottleneck_ext;
        let mut prev = "bottleneck".to_string();
        let mut stage_rows = Vec::new();
        for st in &model.decoder {
            let target = st.out_extents(cur);
            let source_ext = match st.source {
                SkipSource::Router => {
                    if let Some(r) = &model.router {
                        router_cost += r.route_cost(b, &skip_ext, target);
                    }
                    live.alloc(format!("routed{}", st.index), bytes(rw, target));
                    target
                }
                SkipSource::Encoder(i) => skip_ext[i - 1],
                SkipSource::Stem => se,
            };
            let name = format!("decoder.stage{}", st.index);
            stage_rows.push((name.clone(), st.cost(b, cur, source_ext), bytes(st.cout, target)));
            if st.spb.is_some() {
                stage_rows.push((
                    format!("decoder.spb{}", st.index),
                    st.spb_cost(b, cur),
                    bytes(st.cout, target),
                ));
            }
            live.alloc(format!("D{}", st.index), bytes(st.cout, target));
            live.free(&prev);
            match st.source {
                SkipSource::Router => live.free(&format!("routed{}", st.index)),
                SkipSource::Encoder(i) => live.free(&format!("E{i}")),
                SkipSource::Stem => live.free("stem"),
            }
            if st.index == 2 {
                for i in 1..=4 {
                    live.free(&format!("aligned{i}"));
                }
            }
            prev = format!("D{}", st.index);
            cur = target;
        }
        if model.router.is_some() {
            push("router".into(), router_cost, 0);
        }
        for (name, cost, act) in stage_rows {
            push(name, cost, act);
        }
        let out_ext = model.head.out_extents(cur);
        let nc = cfg.num_classes;
        push("decoder.head".into(), model.head.cost(b, cur), bytes(nc, out_ext));
        live.alloc("logits", bytes(nc, out_ext));
        live.free(&prev);
        live.free("anchors");

        let total_macs = rows.iter().map(|r| r.macs).sum();
        Ok(Self {
            input_shape: shape,
            precision_bytes,
            fingerprint: fingerprint(cfg),
            config: cfg.clone(),
            total_params: rows.iter().map(|r| r.params).sum(),
            total_macs,
            total_flops_mac2: 2 * total_macs,
            total_flops_mac1: total_macs,
            total_aux_ops: rows.iter().map(|r| r.aux_ops).sum(),
            activation_peak_bytes: live.peak,
            ledger: live.events,
            rows,
        })
    }

    /// Parameter rows only; independent of the input shape.
    pub fn params_only(model: &LightMedSeg) -> Result<Self> {
        Self::analyze(model, [1, model.config.in_channels, 16, 16, 16], 4)
    }

    pub fn row(&self, module: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.module == module)
    }

    /// Sum of rows whose module name starts with `prefix` on a segment boundary.
    pub fn params_under(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|r| crate::params::has_prefix(&r.module, prefix))
            .map(|r| r.params)
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let [b, c, d, h, w] = self.input_shape;
        let _ = writeln!(s, "config {}  input ({b},{c},{d},{h},{w})", self.fingerprint);
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>16} {:>16} {:>16} {:>14}",
            "module", "params", "MACs", "FLOPs(mac=2)", "aux ops", "activ bytes"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<22} {:>10} {:>16} {:>16} {:>16} {:>14}",
                r.module, r.params, r.macs, r.flops_mac2, r.aux_ops, r.activ_bytes
            );
        }
        let _ = writeln!(
            s,
            "{:<22} {:>10} {:>16} {:>16} {:>16}",
            "total", self.total_params, self.total_macs, self.total_flops_mac2, self.total_aux_ops
        );
        let _ = writeln!(
            s,
            "params {:.4} M | FLOPs {:.3} G (mac=2flop) / {:.3} G (mac=1flop) | aux {:.3} G",
            self.total_params as f64 / 1e6,
            self.total_flops_mac2 as f64 / 1e9,
            self.total_flops_mac1 as f64 / 1e9,
            self.total_aux_ops as f64 / 1e9
        );
        let _ = writeln!(
            s,
            "activation estimate {:.2} MiB peak ({}-byte reals, block-level liveness, not a measured figure)",
            self.activation_peak_bytes as f64 / (1 << 20) as f64,
            self.precision_bytes
        );
        s
    }
}
