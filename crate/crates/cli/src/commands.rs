//! Subcommand bodies. Every output is computed in full before the first
//! file is written, so a failing run leaves nothing behind.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use redlab::checkpoint::{load_model, save_model};
use redlab::config::RunConfig;
use redlab::datagen::{make_pair, Corpus};
use redlab::dynbaseline::DynamicConv;
use redlab::model::{check_loss_gradients, evaluate, train as train_model, StageConv, ToyEnhancer};
use redlab::pog;
use redlab::redundancy::{decoder_selectors, dmr as dmr_report, parse_selectors, probe_sweep, LayerSelector};
use redlab::{Parameterized, Tensor};

use crate::error::{CliError, CliResult};

/// Gradient check tolerance and the share of kink-crossing coordinates
/// tolerated before the check is considered unreliable.
const GRADCHECK_TOL: f64 = 1e-4;
const GRADCHECK_MAX_KINK_FRACTION: f64 = 0.05;

fn parse_size(size: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("--size expects HxW, got '{size}'"));
    let (h, w) = size.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    for v in [h, w] {
        if v < 8 || v % 4 != 0 {
            return Err(CliError::usage(format!(
                "image sides must be multiples of 4 and at least 8, got {h}x{w}"
            )));
        }
    }
    Ok((h, w))
}

fn parse_seeds(list: &str) -> CliResult<Vec<u64>> {
    let seeds = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| CliError::usage(format!("bad seed '{s}'")))
        })
        .collect::<CliResult<Vec<u64>>>()?;
    if seeds.is_empty() {
        return Err(CliError::usage("--seeds must name at least one seed"));
    }
    Ok(seeds)
}

fn split_pairs(corpus: &Corpus, split: &str) -> CliResult<Vec<(Tensor, Tensor)>> {
    let pairs = match split {
        "train" => corpus.train_pairs(),
        "val" => corpus.val_pairs(),
        other => return Err(CliError::usage(format!("--split must be train or val, got '{other}'"))),
    };
    if pairs.is_empty() {
        return Err(CliError::usage(format!("the {split} split is empty")));
    }
    Ok(pairs)
}

fn selectors_for(model: &ToyEnhancer, list: &str) -> CliResult<Vec<LayerSelector>> {
    let selectors = if list.trim() == "all" {
        decoder_selectors(model)
    } else {
        parse_selectors(list)?
    };
    if selectors.is_empty() {
        return Err(CliError::usage("selector list is empty"));
    }
    for s in &selectors {
        s.resolve(model)?;
    }
    Ok(selectors)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn json_bytes<T: Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    Ok(out)
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| CliError::usage(e.to_string()))
}

pub fn gen_data(seed: u64, out: &Path, count: usize, val: usize, size: &str) -> CliResult<()> {
    let (h, w) = parse_size(size)?;
    if count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let corpus = Corpus::generate(seed, count, val, h, w)?;
    corpus.save(out)?;
    println!("wrote {count} train and {val} val pairs of {h}x{w} to {}", out.display());
    Ok(())
}

pub fn train(config: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let corpus = Corpus::load(data)?;
    let pairs = split_pairs(&corpus, "train")?;
    let mut model = ToyEnhancer::new(cfg.model_config())?;
    let state = train_model(&mut model, &pairs, cfg.steps, cfg.seed, cfg.lr)?;
    model.freeze()?;
    let val_psnr = if corpus.val.is_empty() {
        None
    } else {
        Some(evaluate(&model, &corpus.val_pairs())?)
    };

    let rows: Vec<Vec<String>> = state
        .loss_history
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    let history = csv_bytes(&["step", "loss"], &rows)?;
    let summary = json_bytes(&json!({
        "steps": cfg.steps,
        "seed": cfg.seed,
        "initial_loss": state.initial_loss,
        "final_loss": state.final_loss,
        "val_psnr": val_psnr,
    }))?;

    save_model(out, &model)?;
    write_bytes(&out.join("loss_history.csv"), &history)?;
    write_bytes(&out.join("train_summary.json"), &summary)?;
    println!(
        "trained {} steps: loss {} -> {}{}",
        cfg.steps,
        state.initial_loss,
        state.final_loss,
        val_psnr.map(|p| format!(", val PSNR {p:.3} dB")).unwrap_or_default()
    );
    Ok(())
}

pub fn probe(ckpt: &Path, data: &Path, selectors: &str, seeds: &str, split: &str, out: &Path) -> CliResult<()> {
    let model = load_model(ckpt)?;
    let corpus = Corpus::load(data)?;
    let pairs = split_pairs(&corpus, split)?;
    let selectors = selectors_for(&model, selectors)?;
    let seeds = parse_seeds(seeds)?;
    let (low, refs): (Vec<Tensor>, Vec<Tensor>) = pairs.into_iter().unzip();
    let table = probe_sweep(&model, &selectors, &low, &refs, &seeds)?;

    let rows: Vec<Vec<String>> = table
        .rows
        .iter()
        .map(|r| {
            vec![
                r.selector.path.clone(),
                r.selector.kind.to_string(),
                r.seed.to_string(),
                r.reset_count.to_string(),
                mean(&r.psnr_before).to_string(),
                mean(&r.psnr_after).to_string(),
                r.delta_psnr_mean.to_string(),
                r.poi.to_string(),
            ]
        })
        .collect();
    let bytes = csv_bytes(
        &[
            "selector",
            "kind",
            "seed",
            "reset_count",
            "psnr_before_mean",
            "psnr_after_mean",
            "delta_psnr_mean",
            "poi",
        ],
        &rows,
    )?;
    write_bytes(out, &bytes)?;
    println!("{:<12} {:>5} {:>16} {:>9}", "kind", "rows", "mean dPSNR (dB)", "mean POI");
    for k in &table.by_kind {
        println!(
            "{:<12} {:>5} {:>16.4} {:>9.3}",
            k.kind.as_str(),
            k.rows,
            k.mean_delta_psnr,
            k.mean_poi
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn dmr(
    ckpt: &Path,
    data: &Path,
    selectors: &str,
    seed: u64,
    i_max: f64,
    split: &str,
    out: &Path,
) -> CliResult<()> {
    // Checked first so an empty list fails before any loading.
    if selectors.trim() != "all" && parse_selectors(selectors)?.is_empty() {
        return Err(CliError::usage("selector list is empty"));
    }
    if !(i_max.is_finite() && i_max > 0.0) {
        return Err(CliError::usage(format!("--i-max must be positive, got {i_max}")));
    }
    let model = load_model(ckpt)?;
    let corpus = Corpus::load(data)?;
    let images: Vec<Tensor> = split_pairs(&corpus, split)?.into_iter().map(|(low, _)| low).collect();
    let selectors = selectors_for(&model, selectors)?;
    let report = dmr_report(&model, &selectors, &images, seed, i_max)?;

    let mut rows = Vec::new();
    for (sel, terms) in report.selectors.iter().zip(&report.terms) {
        for (j, t) in terms.iter().enumerate() {
            rows.push(vec![sel.to_string(), j.to_string(), t.to_string()]);
        }
    }
    let terms = csv_bytes(&["selector", "image", "term_db"], &rows)?;
    let summary = json_bytes(&report.summary())?;
    write_bytes(out, &summary)?;
    write_bytes(&out.with_extension("terms.csv"), &terms)?;
    println!("DMR {} dB over {} selectors x {} images", report.dmr, report.n, report.m);
    Ok(())
}

#[derive(Serialize)]
struct GeneratorScore {
    name: String,
    score: f64,
}

#[derive(Serialize)]
struct DynconvScore {
    name: String,
    score: f64,
    candidate_similarity: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct DegradeReport {
    split: String,
    images: usize,
    generators: Vec<GeneratorScore>,
    dynconv: Vec<DynconvScore>,
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

pub fn degrade_score(ckpt: &Path, data: &Path, split: &str, out: &Path) -> CliResult<()> {
    let model = load_model(ckpt)?;
    let corpus = Corpus::load(data)?;
    let pairs = split_pairs(&corpus, split)?;
    if pairs.len() < 2 {
        return Err(CliError::usage("degrade-score needs at least 2 images"));
    }
    let mut adr_inputs: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    let mut dyn_inputs: BTreeMap<String, Vec<Tensor>> = BTreeMap::new();
    for (low, _) in &pairs {
        let (_, trace) = model.trace(low)?;
        for (name, t) in trace.adr_inputs {
            adr_inputs.entry(name).or_default().push(t);
        }
        for (name, t) in trace.dynconv_inputs {
            dyn_inputs.entry(name).or_default().push(t);
        }
    }

    let mut generators = Vec::new();
    let mut dynconv = Vec::new();
    for (i, stage) in model.decoder().iter().enumerate() {
        if let Some(block) = &stage.attn.adr {
            let prefix = format!("decoder.{i}.attn.adr");
            let inputs = &adr_inputs[&prefix];
            for (which, gen) in [("gen1", block.gen1()), ("gen2", block.gen2())] {
                generators.push(GeneratorScore {
                    name: format!("{prefix}.{which}"),
                    score: pog::degradation_score(gen, inputs)?,
                });
            }
        }
        if let StageConv::Dynamic { conv, .. } = &stage.conv {
            let name = format!("decoder.{i}.dynconv");
            let conv: &DynamicConv = conv;
            dynconv.push(DynconvScore {
                score: conv.degradation_score(&dyn_inputs[&name])?,
                candidate_similarity: rows_of(&conv.candidate_similarity()?),
                name,
            });
        }
    }
    if generators.is_empty() && dynconv.is_empty() {
        eprintln!("note: the checkpoint has no generated or candidate-weighted kernels");
    }
    let report = DegradeReport {
        split: split.to_string(),
        images: pairs.len(),
        generators,
        dynconv,
    };
    let bytes = json_bytes(&report)?;
    write_bytes(out, &bytes)?;
    for g in &report.generators {
        println!("{:<28} {}", g.name, g.score);
    }
    for d in &report.dynconv {
        println!("{:<28} {}", d.name, d.score);
    }
    Ok(())
}

const GRID_KEYS: [&str; 3] = ["D_m", "D_e", "D_k"];

fn parse_grid(entries: &[String]) -> CliResult<BTreeMap<&'static str, Vec<usize>>> {
    let mut grid = BTreeMap::new();
    for e in entries {
        let (key, values) = e
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("grid entry '{e}' is not KEY=v1,v2")))?;
        let key = GRID_KEYS
            .into_iter()
            .find(|k| *k == key.trim())
            .ok_or_else(|| CliError::usage(format!("unknown grid key '{key}', expected D_m, D_e or D_k")))?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| CliError::usage(format!("bad {key} value '{v}'")))
            })
            .collect::<CliResult<Vec<usize>>>()?;
        if grid.insert(key, values).is_some() {
            return Err(CliError::usage(format!("grid key {key} given twice")));
        }
    }
    Ok(grid)
}

pub fn ablate(config: &Path, grid: &[String], out: &Path) -> CliResult<()> {
    let base = RunConfig::load(config)?;
    let grid = parse_grid(grid)?;
    let mut configs = vec![base.clone()];
    for (key, values) in &grid {
        configs = configs
            .iter()
            .flat_map(|c| {
                values.iter().map(move |&v| {
                    let mut c = c.clone();
                    match *key {
                        "D_m" => c.adr.d_m = v,
                        "D_e" => c.adr.d_e = v,
                        _ => c.adr.d_k = v,
                    }
                    c
                })
            })
            .collect();
    }
    for c in &mut configs {
        c.adr.enabled = true;
        c.validate()?;
    }
    let d = base.data;
    if d.val == 0 {
        return Err(CliError::usage("ablate reports validation PSNR and needs data.val >= 1"));
    }
    let corpus = Corpus::generate(d.seed, d.train, d.val, d.size, d.size)?;
    let (train_pairs, val_pairs) = (corpus.train_pairs(), corpus.val_pairs());

    let mut rows = Vec::with_capacity(configs.len());
    for c in &configs {
        let mut model = ToyEnhancer::new(c.model_config())?;
        let params = model.param_count();
        let macs = model.forward_macs(d.size, d.size)?;
        let state = train_model(&mut model, &train_pairs, c.steps, c.seed, c.lr)?;
        let val_psnr = evaluate(&model, &val_pairs)?;
        println!(
            "D_m={} D_e={} D_k={}: loss {} -> {}, val PSNR {val_psnr:.3} dB",
            c.adr.d_m, c.adr.d_e, c.adr.d_k, state.initial_loss, state.final_loss
        );
        rows.push(vec![
            c.adr.d_m.to_string(),
            c.adr.d_e.to_string(),
            c.adr.d_k.to_string(),
            params.to_string(),
            macs.to_string(),
            state.initial_loss.to_string(),
            state.final_loss.to_string(),
            val_psnr.to_string(),
        ]);
    }
    let bytes = csv_bytes(
        &["D_m", "D_e", "D_k", "params", "macs", "initial_loss", "final_loss", "val_psnr"],
        &rows,
    )?;
    write_bytes(out, &bytes)
}

pub fn gradcheck(config: &Path, samples: usize, eps: f64) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    if samples == 0 {
        return Err(CliError::usage("--samples must be at least 1"));
    }
    let model = ToyEnhancer::new(cfg.model_config())?;
    let pair = make_pair(cfg.data.seed, cfg.data.size, cfg.data.size)?;
    let report = check_loss_gradients(&model, &pair.low, samples, eps, cfg.seed)?;
    let smooth_failures = report.smooth_failures(GRADCHECK_TOL).count();
    println!(
        "checked {} coordinates: max rel error {:.3e}, smooth max {:.3e}, {} kink crossings, {} smooth failures",
        report.checked,
        report.max_rel_error,
        report.smooth_max_rel_error(),
        report.kink_crossings(),
        smooth_failures
    );
    if let Some(w) = report.failures(GRADCHECK_TOL).find(|m| !m.crosses_kink) {
        println!(
            "worst smooth mismatch: {}[{}] analytic {} numeric {}",
            w.param, w.index, w.analytic, w.numeric
        );
    }
    if report.passes_smooth(GRADCHECK_TOL, GRADCHECK_MAX_KINK_FRACTION) {
        println!("gradcheck passed");
        Ok(())
    } else {
        Err(CliError::numeric(format!(
            "gradcheck failed: {smooth_failures} smooth failures, {} of {} coordinates cross a kink",
            report.kink_crossings(),
            report.checked
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("16x24").unwrap(), (16, 24));
        assert_eq!(parse_size("8X8").unwrap(), (8, 8));
        for bad in ["16", "4x8", "10x12", "ax8", ""] {
            assert!(parse_size(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn grid_parsing() {
        let g = parse_grid(&["D_e=16,32".into(), "D_m=4".into()]).unwrap();
        assert_eq!(g["D_e"], vec![16, 32]);
        assert_eq!(g["D_m"], vec![4]);
        assert!(parse_grid(&["D_x=1".into()]).is_err());
        assert!(parse_grid(&["D_m=1".into(), "D_m=2".into()]).is_err());
        assert!(parse_grid(&["D_m=1,".into()]).is_err());
        assert!(parse_grid(&["D_m".into()]).is_err());
    }

    #[test]
    fn seed_parsing() {
        assert_eq!(parse_seeds("0, 1,2").unwrap(), vec![0, 1, 2]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("-1").is_err());
    }
}
