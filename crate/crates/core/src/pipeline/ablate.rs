use std::fmt::Write as _;
use std::path::Path;

use super::{evaluate, load_episodes, pretrain, EvalReport, PipelineError, RunConfig};
use crate::model::Flags;
use crate::world::{Manifest, Split};

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub flags: Flags,
    pub data_fraction: f64,
}

/// Components switched on one at a time, then the prompt: RSSM, +SSP,
/// +SSP+DMB, +SSP+DMB+MLN, all. Each at 100% data, plus the full model at 50%.
pub fn lattice() -> Vec<Variant> {
    let steps = [
        ("rssm", Flags::RSSM),
        ("ssp", Flags { ssp: true, ..Flags::RSSM }),
        ("ssp+dmb", Flags { ssp: true, dmb: true, ..Flags::RSSM }),
        ("ssp+dmb+mln", Flags { ssp: true, dmb: true, mln: true, prompt: false }),
        ("full", Flags::FULL),
    ];
    let mut out: Vec<Variant> =
        steps.iter().map(|(l, f)| Variant { label: l.to_string(), flags: *f, data_fraction: 1.0 }).collect();
    out.push(Variant { label: "full@50%".into(), flags: Flags::FULL, data_fraction: 0.5 });
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub seed: u64,
    pub parameters: usize,
    pub report: EvalReport,
}

/// Pretrains and evaluates every variant with every seed. Runs sharing a
/// seed see the same batches and the same initial values of shared groups.
pub fn ablate(
    base: &RunConfig,
    manifest: &Manifest,
    variants: &[Variant],
    seeds: &[u64],
    metrics_dir: Option<&Path>,
) -> Result<Vec<AblationRow>, PipelineError> {
    let val = load_episodes(manifest, &manifest.split(Split::Val))?;
    let mut rows = Vec::new();
    for v in variants {
        let train = load_episodes(manifest, &manifest.train_fraction(v.data_fraction))?;
        for &seed in seeds {
            let cfg = RunConfig { flags: v.flags, data_fraction: v.data_fraction, seed, ..base.clone() };
            let path = metrics_dir.map(|d| d.join(format!("{}_seed{seed}.jsonl", v.label.replace(['+', '%', '@'], "_"))));
            log::info!("ablation {} seed {seed}: {} episodes", v.label, train.len());
            let out = pretrain(&cfg, &train, path.as_deref())?;
            let report = evaluate(&out.checkpoint.model, &val, seed)?;
            rows.push(AblationRow { variant: v.clone(), seed, parameters: out.checkpoint.model.params.count(), report });
        }
    }
    Ok(rows)
}

/// Tab-separated table with one line per row and a header.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    let Some(first) = rows.first() else { return out };
    let names: Vec<String> = first.report.named().into_iter().map(|(n, _)| n).collect();
    let _ = writeln!(out, "variant\tflags\tdata_fraction\tseed\tparameters\t{}", names.join("\t"));
    for r in rows {
        let values: Vec<String> = r.report.named().into_iter().map(|(_, v)| format!("{v:.6}")).collect();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.variant.label,
            r.variant.flags.label(),
            r.variant.data_fraction,
            r.seed,
            r.parameters,
            values.join("\t")
        );
    }
    out
}
