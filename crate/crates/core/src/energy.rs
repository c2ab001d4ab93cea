//! FLOP and synaptic-operation accounting with picojoule energy estimates.
//!
//! Spike-driven layers cost `E_AC` per accumulate, `SOPs = fr × T × FLOPs`;
//! the layers that consume the encoder output cost `E_MAC` per FLOP. BN,
//! pooling and neurons are free. Energies are carried as integer attojoules
//! so that totals are exact sums of rows.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use spikelab_numcore::Tensor;

use crate::error::{param_err, Error, Result};
use crate::layers::{LayerKind, LayerRecord, Part, Phase};
use crate::model::Network;
use crate::neuron::SpikeFn;

/// Energy per multiply-accumulate, pJ.
pub const E_MAC_PJ: f64 = 4.6;
/// Energy per accumulate, pJ.
pub const E_AC_PJ: f64 = 0.9;
const E_MAC_AJ: u64 = 4_600_000;
const E_AC_AJ: u64 = 900_000;
const AJ_PER_PJ: f64 = 1e6;
const PJ_PER_MJ: f64 = 1e9;

/// Shape-resolved description of one MAC-bearing layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Conv {
        kernel: usize,
        in_channels: usize,
        out_channels: usize,
        out_h: usize,
        out_w: usize,
    },
    Depthwise {
        kernel: usize,
        channels: usize,
        h: usize,
        w: usize,
    },
    Linear {
        d_in: usize,
        d_out: usize,
        tokens: usize,
    },
    Pool,
    Neuron,
    Identity,
}

/// FLOPs of one frame. Zero-sized dimensions are rejected as unresolved.
pub fn flops(layer: &LayerShape) -> Result<u64> {
    let dims: Vec<u64> = match *layer {
        LayerShape::Conv {
            kernel,
            in_channels,
            out_channels,
            out_h,
            out_w,
        } => vec![kernel as u64, kernel as u64, in_channels as u64, out_channels as u64, out_h as u64, out_w as u64],
        LayerShape::Depthwise { kernel, channels, h, w } => {
            vec![kernel as u64, kernel as u64, channels as u64, h as u64, w as u64]
        }
        LayerShape::Linear { d_in, d_out, tokens } => vec![d_in as u64, d_out as u64, tokens as u64],
        LayerShape::Pool | LayerShape::Neuron | LayerShape::Identity => return Ok(0),
    };
    if dims.contains(&0) {
        return param_err(format!("unresolved layer shape {layer:?}"));
    }
    Ok(2 * dims.iter().product::<u64>())
}

/// `fr × T × FLOPs`. The rate must lie in `[0, 1]`.
pub fn sops(flops: u64, fr: f64, timesteps: usize) -> Result<f64> {
    if !(0.0..=1.0).contains(&fr) {
        return param_err(format!("firing rate {fr} outside [0, 1]: spikes are not binary upstream"));
    }
    if timesteps == 0 {
        return param_err("timesteps must be at least 1");
    }
    Ok(fr * timesteps as f64 * flops as f64)
}

/// `E_MAC·FLOPs_first + E_AC·ΣSOPs`, in mJ.
pub fn energy_snn(first_layer_flops: u64, spiking_sops: &[f64]) -> f64 {
    let pj = E_MAC_PJ * first_layer_flops as f64 + E_AC_PJ * spiking_sops.iter().sum::<f64>();
    pj / PJ_PER_MJ
}

/// `E_MAC·FLOPs`, in mJ.
pub fn energy_ann(total_flops: u64) -> f64 {
    E_MAC_PJ * total_flops as f64 / PJ_PER_MJ
}

/// Operation class a row is charged at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Charge {
    Mac,
    Ac,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyRow {
    pub layer: String,
    pub stage: usize,
    pub part: Part,
    pub kind: LayerKind,
    pub charge: Charge,
    pub flops: u64,
    /// Mean input value; 1 for MAC rows.
    pub fr: f64,
    pub timesteps: usize,
    pub sops: f64,
    /// Integer attojoules (1e-6 pJ).
    pub energy_aj: u64,
    /// Input carried spike values above 1.
    pub multi_bit: bool,
}

impl EnergyRow {
    pub fn energy_pj(&self) -> f64 {
        self.energy_aj as f64 / AJ_PER_PJ
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTotal {
    pub stage: usize,
    pub part: Part,
    pub energy_aj: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub rows: Vec<EnergyRow>,
    pub stage_totals: Vec<StageTotal>,
    pub total_aj: u64,
    /// A spiking layer received values above 1 (pre-spike shortcuts).
    pub multi_bit: bool,
    /// How attention products are charged.
    pub notes: Vec<String>,
}

/// Energy of `sops` operations at `unit_aj` each, rounded to the attojoule.
fn charge_aj(sops: f64, unit_aj: u64) -> u64 {
    (sops * unit_aj as f64).round() as u64
}

impl EnergyReport {
    /// Builds rows from forward-pass records; totals are exact sums.
    pub fn from_records(records: &[LayerRecord]) -> Result<Self> {
        let mut rows = Vec::with_capacity(records.len());
        for r in records {
            let (charge, fr, unit) = if r.encoding {
                (Charge::Mac, 1.0, E_MAC_AJ)
            } else {
                (Charge::Ac, r.input_mean, E_AC_AJ)
            };
            if !(0.0..=2.0).contains(&fr) {
                return Err(Error::Domain(format!("{}: input mean {fr} is not a spike rate", r.name)));
            }
            // a spike of value 2 counts as two accumulates, so the mean input
            // value is the effective rate
            let sops = fr * r.timesteps as f64 * r.flops as f64;
            rows.push(EnergyRow {
                layer: r.name.clone(),
                stage: r.stage,
                part: r.part,
                kind: r.kind,
                charge,
                flops: r.flops,
                fr,
                timesteps: r.timesteps,
                sops,
                energy_aj: charge_aj(sops, unit),
                multi_bit: !r.encoding && r.input_max > 1.0,
            });
        }
        Ok(Self::assemble(rows))
    }

    fn assemble(rows: Vec<EnergyRow>) -> Self {
        let multi_bit = rows.iter().any(|r| r.multi_bit);
        let mut by_stage: BTreeMap<(usize, Part), u64> = BTreeMap::new();
        for r in &rows {
            *by_stage.entry((r.stage, r.part)).or_default() += r.energy_aj;
        }
        let stage_totals: Vec<StageTotal> = by_stage
            .into_iter()
            .map(|((stage, part), energy_aj)| StageTotal { stage, part, energy_aj })
            .collect();
        let total_aj = stage_totals.iter().map(|s| s.energy_aj).sum();
        let mut notes = vec!["attention products are charged at the firing rate of their left operand".to_string()];
        if multi_bit {
            notes.push("multi-bit transmission: spike values of 2 are charged as two accumulates".to_string());
        }
        EnergyReport {
            e_mac_pj: E_MAC_PJ,
            e_ac_pj: E_AC_PJ,
            rows,
            stage_totals,
            total_aj,
            multi_bit,
            notes,
        }
    }

    pub fn total_pj(&self) -> f64 {
        self.total_aj as f64 / AJ_PER_PJ
    }

    pub fn total_mj(&self) -> f64 {
        self.total_pj() / PJ_PER_MJ
    }

    /// Energy of the MAC-charged (encoder-facing) rows, aJ.
    pub fn mac_aj(&self) -> u64 {
        self.rows.iter().filter(|r| r.charge == Charge::Mac).map(|r| r.energy_aj).sum()
    }

    /// Energy per breakdown column in mJ, summed over stages.
    pub fn part_totals_mj(&self) -> BTreeMap<Part, f64> {
        let mut out: BTreeMap<Part, u64> = BTreeMap::new();
        for s in &self.stage_totals {
            *out.entry(s.part).or_default() += s.energy_aj;
        }
        out.into_iter().map(|(p, aj)| (p, aj as f64 / AJ_PER_PJ / PJ_PER_MJ)).collect()
    }

    pub const CSV_HEADER: &'static str = "layer,stage,kind,flops,fr,T,sops,energy_pJ";

    /// One line per row. `stage` is `<index>:<part>`, `kind` is
    /// `<layer kind>:<mac|ac>` with a `:multibit` suffix on rows that saw
    /// spike values above 1; floats use shortest round-trip formatting.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            let charge = match (r.charge, r.multi_bit) {
                (Charge::Mac, _) => "mac",
                (Charge::Ac, false) => "ac",
                (Charge::Ac, true) => "ac:multibit",
            };
            let _ = writeln!(
                s,
                "{},{}:{},{}:{},{},{:?},{},{:?},{}",
                r.layer,
                r.stage,
                r.part.label(),
                r.kind.label(),
                charge,
                r.flops,
                r.fr,
                r.timesteps,
                r.sops,
                format_aj(r.energy_aj)
            );
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(Self::CSV_HEADER) {
            return Err(Error::Parse("energy CSV header mismatch".into()));
        }
        let bad = |n: usize, m: &str| Error::Parse(format!("energy CSV line {}: {m}", n + 2));
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(bad(n, "expected 8 fields"));
            }
            let (stage, part) = f[1].split_once(':').ok_or_else(|| bad(n, "stage"))?;
            let (kind, charge) = f[2].split_once(':').ok_or_else(|| bad(n, "kind"))?;
            let (charge, multi_bit) = match charge {
                "mac" => (Charge::Mac, false),
                "ac" => (Charge::Ac, false),
                "ac:multibit" => (Charge::Ac, true),
                _ => return Err(bad(n, "charge")),
            };
            let row = EnergyRow {
                layer: f[0].to_string(),
                stage: stage.parse().map_err(|_| bad(n, "stage index"))?,
                part: Part::from_label(part).ok_or_else(|| bad(n, "part"))?,
                kind: LayerKind::from_label(kind).ok_or_else(|| bad(n, "kind"))?,
                charge,
                flops: f[3].parse().map_err(|_| bad(n, "flops"))?,
                fr: f[4].parse().map_err(|_| bad(n, "fr"))?,
                timesteps: f[5].parse().map_err(|_| bad(n, "T"))?,
                sops: f[6].parse().map_err(|_| bad(n, "sops"))?,
                energy_aj: parse_aj(f[7]).ok_or_else(|| bad(n, "energy"))?,
                multi_bit,
            };
            rows.push(row);
        }
        Ok(Self::assemble(rows))
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Per-stage summary in mJ with four significant digits.
    pub fn summary_table(&self) -> String {
        let parts = [Part::PatchEmbed, Part::TokenMix, Part::Mlp, Part::Classifier];
        let mut s = String::from("stage,patch_embed_mJ,token_mix_mJ,mlp_mJ,classifier_mJ,total_mJ\n");
        let stages: std::collections::BTreeSet<usize> = self.stage_totals.iter().map(|t| t.stage).collect();
        for st in stages {
            let cell = |p: Part| {
                self.stage_totals
                    .iter()
                    .find(|t| t.stage == st && t.part == p)
                    .map_or(0, |t| t.energy_aj)
            };
            let total: u64 = parts.iter().map(|&p| cell(p)).sum();
            let _ = write!(s, "{}", st + 1);
            for p in parts {
                let _ = write!(s, ",{}", sig4(cell(p) as f64 / AJ_PER_PJ / PJ_PER_MJ));
            }
            let _ = writeln!(s, ",{}", sig4(total as f64 / AJ_PER_PJ / PJ_PER_MJ));
        }
        let _ = writeln!(s, "all,,,,,{}", sig4(self.total_mj()));
        s
    }
}

/// Exact decimal pJ rendering of an attojoule count.
fn format_aj(aj: u64) -> String {
    format!("{}.{:06}", aj / 1_000_000, aj % 1_000_000)
}

fn parse_aj(s: &str) -> Option<u64> {
    let (int, frac) = s.split_once('.')?;
    if frac.len() != 6 {
        return None;
    }
    Some(int.parse::<u64>().ok()? * 1_000_000 + frac.parse::<u64>().ok()?)
}

fn sig4(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    format!("{v:.3e}")
}

/// Runs one inference pass and charges every MAC-bearing layer.
pub fn instrument(net: &Network, inputs: &Tensor) -> Result<EnergyReport> {
    let ins = net.inspect(inputs, Phase::Eval, SpikeFn::Heaviside)?;
    EnergyReport::from_records(&ins.records)
}
