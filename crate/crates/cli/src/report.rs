// SPDX-License-Identifier: Apache-2.0

//! Per-backbone BSL/MHFA tables and plot data.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _};
use cmprobe::digest::config_digest;
use cmprobe::evalkit::{
    average_eer, select_best_single_layer, sweep_plot_tsv, weights_plot_tsv, LayerSweepReport, LayerWeightReport,
};

use crate::commands::{Context, EvalRow};
use crate::output::{require_out, write_meta, write_text};

struct Row {
    backbone: String,
    bsl_layer: Option<usize>,
    bsl: BTreeMap<String, f64>,
    mhfa: BTreeMap<String, f64>,
}

fn read(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn read_mhfa(path: &Path, into: &mut BTreeMap<String, BTreeMap<String, f64>>) -> anyhow::Result<()> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    for row in reader.deserialize() {
        let row: EvalRow = row.with_context(|| format!("parsing {}", path.display()))?;
        let eer: f64 = row.eer.parse().with_context(|| format!("{}: bad eer {:?}", path.display(), row.eer))?;
        if into.entry(row.backbone.clone()).or_default().insert(row.corpus.clone(), eer).is_some() {
            bail!("{}: {} / {} listed twice", path.display(), row.backbone, row.corpus);
        }
    }
    Ok(())
}

fn cell(v: Option<&f64>, scale: f64, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.*}", digits, v * scale))
}

pub fn run(ctx: &Context, sweeps: &[PathBuf], mhfa: &[PathBuf], weights: &[PathBuf], in_domain: &str) -> anyhow::Result<()> {
    let out = require_out(&ctx.out)?;
    let reports = sweeps
        .iter()
        .map(|p| Ok(LayerSweepReport::from_csv(&read(p)?, p)?))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let mut mhfa_eers = BTreeMap::new();
    for p in mhfa {
        read_mhfa(p, &mut mhfa_eers)?;
    }

    let mut corpora: BTreeSet<String> = reports.iter().flat_map(|r| r.rows.iter().map(|row| row.corpus.clone())).collect();
    corpora.extend(mhfa_eers.values().flat_map(|m| m.keys().cloned()));
    let ood: Vec<String> = corpora.iter().filter(|c| *c != in_domain).cloned().collect();
    let ood_refs: Vec<&str> = ood.iter().map(String::as_str).collect();
    let columns: Vec<String> = corpora.contains(in_domain).then(|| in_domain.to_string()).into_iter().chain(ood.iter().cloned()).collect();

    let mut rows: BTreeMap<String, Row> = BTreeMap::new();
    for report in &reports {
        let layer = select_best_single_layer(report, &ood_refs)
            .with_context(|| format!("selecting best single layer of {:?}", report.backbone_tag))?;
        let row = Row {
            backbone: report.backbone_tag.clone(),
            bsl_layer: Some(layer),
            bsl: report.layer_eers(layer).into_iter().collect(),
            mhfa: BTreeMap::new(),
        };
        if rows.insert(report.backbone_tag.clone(), row).is_some() {
            bail!("backbone {:?} has two sweep files", report.backbone_tag);
        }
    }
    for (backbone, eers) in mhfa_eers {
        rows.entry(backbone.clone())
            .or_insert_with(|| Row {
                backbone,
                bsl_layer: None,
                bsl: BTreeMap::new(),
                mhfa: BTreeMap::new(),
            })
            .mhfa = eers;
    }

    let avg = |m: &BTreeMap<String, f64>| {
        let pairs: Vec<(String, f64)> = m.iter().map(|(k, v)| (k.clone(), *v)).collect();
        average_eer(&pairs, &ood_refs).ok()
    };
    let mut tsv = String::from("backbone\tbsl_layer");
    for c in &columns {
        tsv.push_str(&format!("\t{c}_bsl\t{c}_mhfa"));
    }
    tsv.push_str("\tavg_bsl\tavg_mhfa\n");
    let mut human = format!("{:<16} {:>5}", "backbone", "layer");
    for c in &columns {
        human.push_str(&format!(" {:>10} {:>10}", format!("{c}:BSL"), format!("{c}:MHFA")));
    }
    human.push_str(&format!(" {:>10} {:>10}", "avg:BSL", "avg:MHFA"));
    println!("{human}");
    for row in rows.values() {
        let layer = row.bsl_layer.map_or_else(|| "-".into(), |l| l.to_string());
        let mut line = format!("{}\t{layer}", row.backbone);
        let mut human = format!("{:<16} {layer:>5}", row.backbone);
        for c in &columns {
            let (b, m) = (row.bsl.get(c), row.mhfa.get(c));
            line.push_str(&format!("\t{}\t{}", cell(b, 1.0, 6), cell(m, 1.0, 6)));
            human.push_str(&format!(" {:>10} {:>10}", cell(b, 100.0, 2), cell(m, 100.0, 2)));
        }
        let (ab, am) = (avg(&row.bsl), avg(&row.mhfa));
        line.push_str(&format!("\t{}\t{}\n", cell(ab.as_ref(), 1.0, 6), cell(am.as_ref(), 1.0, 6)));
        human.push_str(&format!(" {:>10} {:>10}", cell(ab.as_ref(), 100.0, 2), cell(am.as_ref(), 100.0, 2)));
        tsv.push_str(&line);
        println!("{human}");
    }

    let digest = config_digest(&serde_json::json!({ "command": "report", "in_domain": in_domain }));
    let table = out.join("table.tsv");
    write_text(&table, &tsv)?;
    write_meta(&table, "report", &digest, None)?;
    let sweep_plot = out.join("sweep_plot.tsv");
    write_text(&sweep_plot, &sweep_plot_tsv(&reports))?;
    write_meta(&sweep_plot, "report", &digest, None)?;
    if !weights.is_empty() {
        let series = weights
            .iter()
            .map(|p| {
                let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((name, LayerWeightReport::from_csv(&read(p)?, p)?))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let path = out.join("weights_plot.tsv");
        write_text(&path, &weights_plot_tsv(&series))?;
        write_meta(&path, "report", &digest, None)?;
    }
    Ok(())
}
