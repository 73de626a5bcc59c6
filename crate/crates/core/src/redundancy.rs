//! Parameter-reset probing and the redundancy metric.
//!
//! A probe clones a model, redraws one group of parameters from its
//! initialisation distribution, and compares outputs. [`dmr`] measures how
//! little the output moves (log-MSE against the untouched model, higher means
//! more redundant); [`poi`] and [`probe_sweep`] measure how often the reset
//! model does better against references.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Enhancer;
use crate::numerics::{child_seed, ops, Rng, Tensor};

/// Sentinel for identical images, and the upper bound of every term.
pub const PSNR_CAP: f64 = 100.0;
/// Peak value for float images in `[0, 1]`.
pub const DEFAULT_I_MAX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Static,
    Dynamic,
    Attention,
    Feedforward,
}

impl LayerKind {
    pub const ALL: [LayerKind; 4] = [
        LayerKind::Static,
        LayerKind::Dynamic,
        LayerKind::Attention,
        LayerKind::Feedforward,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Static => "static",
            LayerKind::Dynamic => "dynamic",
            LayerKind::Attention => "attention",
            LayerKind::Feedforward => "feedforward",
        }
    }

    /// Guess from a parameter path: generated or candidate-weighted
    /// parameters are dynamic, attention projections are attention, the rest
    /// feed-forward.
    pub fn infer(path: &str) -> Self {
        let parts: Vec<&str> = path.split('.').collect();
        if parts.iter().any(|p| *p == "adr" || *p == "dynconv") {
            LayerKind::Dynamic
        } else if parts.contains(&"attn") {
            LayerKind::Attention
        } else {
            LayerKind::Feedforward
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LayerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Selector(format!("unknown layer kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSelector {
    pub path: String,
    pub kind: LayerKind,
}

impl LayerSelector {
    pub fn new(path: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            path: path.into(),
            kind,
        }
    }

    /// `path` with an inferred kind.
    pub fn inferred(path: impl Into<String>) -> Self {
        let path = path.into();
        let kind = LayerKind::infer(&path);
        Self { path, kind }
    }

    /// Whether parameter `name` belongs to this group.
    pub fn matches(&self, name: &str) -> bool {
        name == self.path
            || (name.starts_with(&self.path) && name.as_bytes().get(self.path.len()) == Some(&b'.'))
    }

    /// Names and element counts of the parameters this selector covers.
    pub fn resolve<M: Enhancer>(&self, model: &M) -> Result<Vec<(String, usize)>> {
        let mut hits = Vec::new();
        model.visit("", &mut |name, _, t| {
            if self.matches(name) {
                hits.push((name.to_string(), t.len()));
            }
        });
        if self.path.is_empty() || hits.is_empty() {
            return Err(Error::Selector(format!(
                "'{}' matches no parameter tensor",
                self.path
            )));
        }
        Ok(hits)
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.path, self.kind)
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    /// `path` or `path:kind`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let sel = match s.split_once(':') {
            Some((path, kind)) => LayerSelector::new(path, kind.parse()?),
            None => LayerSelector::inferred(s),
        };
        if sel.path.is_empty() {
            return Err(Error::Selector(format!("empty selector path in '{s}'")));
        }
        Ok(sel)
    }
}

/// Parse a comma-separated selector list.
pub fn parse_selectors(list: &str) -> Result<Vec<LayerSelector>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// One selector per decoder parameter group of a model, in visit order.
///
/// Groups are the attention projections and temperature, each reallocation
/// block, the output projection, and the stage convolution.
pub fn decoder_selectors<M: Enhancer>(model: &M) -> Vec<LayerSelector> {
    let mut paths: Vec<String> = Vec::new();
    model.visit("", &mut |name, _, _| {
        if !name.starts_with("decoder.") {
            return;
        }
        let parts: Vec<&str> = name.split('.').collect();
        let depth = if parts.get(2) == Some(&"attn") { 4 } else { 3 };
        let group = parts[..depth.min(parts.len())].join(".");
        if paths.last() != Some(&group) {
            paths.push(group);
        }
    });
    paths.into_iter().map(LayerSelector::inferred).collect()
}

/// Copy of `model` with the selected group redrawn from its initialisation
/// distribution; every other parameter is untouched.
pub fn reset_layer<M: Enhancer>(model: &M, selector: &LayerSelector, rng: &mut Rng) -> Result<M> {
    selector.resolve(model)?;
    let mut out = model.clone();
    out.visit_mut("", &mut |name, role, t| {
        if selector.matches(name) {
            role.reset(t, rng);
        }
    });
    Ok(out)
}

/// `10·log10(I_max² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, i_max: f64) -> Result<f64> {
    psnr_capped(a, b, i_max, PSNR_CAP)
}

pub fn psnr_capped(a: &Tensor, b: &Tensor, i_max: f64, cap: f64) -> Result<f64> {
    if !(i_max > 0.0) {
        return Err(Error::Contract(format!("I_max must be positive, got {i_max}")));
    }
    let mse = ops::mse(a, b)?;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (i_max * i_max / mse).log10()).min(cap))
}

/// Number of worker threads from `REDLAB_THREADS`, default 1.
pub fn thread_budget() -> usize {
    std::env::var("REDLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Index-ordered map that fans out over at most [`thread_budget`] threads.
fn ordered_map<T, R, F>(items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> Result<R> + Sync + Send,
{
    let threads = thread_budget();
    if threads <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
}

fn infer_all<M: Enhancer>(model: &M, images: &[Tensor]) -> Result<Vec<Tensor>> {
    ordered_map(images, |_, x| model.infer(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmrReport {
    pub selectors: Vec<LayerSelector>,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    #[serde(rename = "I_max")]
    pub i_max: f64,
    pub cap: f64,
    /// `terms[i][j]`: selector `i`, image `j`, in dB.
    pub terms: Vec<Vec<f64>>,
    pub dmr: f64,
}

/// JSON summary emitted next to the per-term CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmrSummary {
    pub dmr: f64,
    pub n: usize,
    pub m: usize,
    pub cap: f64,
    #[serde(rename = "I_max")]
    pub i_max: f64,
    pub seed: u64,
}

impl DmrReport {
    pub fn summary(&self) -> DmrSummary {
        DmrSummary {
            dmr: self.dmr,
            n: self.n,
            m: self.m,
            cap: self.cap,
            i_max: self.i_max,
            seed: self.seed,
        }
    }
}

/// Mean capped log-MSE between the model's outputs and the outputs of each
/// single-selector reset.
///
/// Selector `i` is reset with a stream seeded by `child_seed(seed, i)`.
pub fn dmr<M: Enhancer>(
    model: &M,
    selectors: &[LayerSelector],
    images: &[Tensor],
    seed: u64,
    i_max: f64,
) -> Result<DmrReport> {
    if selectors.is_empty() || images.is_empty() {
        return Err(Error::Contract("dmr needs at least one selector and one image".into()));
    }
    if !model.is_frozen() {
        return Err(Error::Contract("dmr requires a frozen model".into()));
    }
    let originals = infer_all(model, images)?;
    let terms = ordered_map(selectors, |i, sel| {
        let mut rng = Rng::new(child_seed(seed, i as u64));
        let probed = reset_layer(model, sel, &mut rng)?;
        images
            .iter()
            .zip(&originals)
            .map(|(x, y)| psnr(y, &probed.infer(x)?, i_max))
            .collect::<Result<Vec<f64>>>()
    })?;
    let total: f64 = terms.iter().flatten().sum();
    let (n, m) = (selectors.len(), images.len());
    Ok(DmrReport {
        selectors: selectors.to_vec(),
        n,
        m,
        seed,
        i_max,
        cap: PSNR_CAP,
        terms,
        dmr: total / (n * m) as f64,
    })
}

fn check_pairs(low: &[Tensor], refs: &[Tensor]) -> Result<()> {
    if low.len() != refs.len() {
        return Err(Error::Contract(format!(
            "{} low images but {} references",
            low.len(),
            refs.len()
        )));
    }
    if low.is_empty() {
        return Err(Error::Contract("no images to probe".into()));
    }
    Ok(())
}

fn psnr_against(outputs: &[Tensor], refs: &[Tensor], i_max: f64) -> Result<Vec<f64>> {
    outputs.iter().zip(refs).map(|(y, r)| psnr(y, r, i_max)).collect()
}

/// Fraction of images where `after` strictly beats `before`.
pub fn improvement_fraction(before: &[f64], after: &[f64]) -> f64 {
    let better = before.iter().zip(after).filter(|(b, a)| a > b).count();
    better as f64 / before.len() as f64
}

/// Fraction of images that score strictly higher after resetting `selector`
/// with a stream seeded by `seed`.
pub fn poi<M: Enhancer>(
    model: &M,
    selector: &LayerSelector,
    low: &[Tensor],
    refs: &[Tensor],
    seed: u64,
    i_max: f64,
) -> Result<f64> {
    check_pairs(low, refs)?;
    let before = psnr_against(&infer_all(model, low)?, refs, i_max)?;
    let probed = reset_layer(model, selector, &mut Rng::new(seed))?;
    let after = psnr_against(&infer_all(&probed, low)?, refs, i_max)?;
    Ok(improvement_fraction(&before, &after))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub selector: LayerSelector,
    /// Sweep seed; the reset stream is `child_seed(seed, selector index)`.
    pub seed: u64,
    /// Number of scalar parameters redrawn.
    pub reset_count: usize,
    pub psnr_before: Vec<f64>,
    pub psnr_after: Vec<f64>,
    pub delta_psnr_mean: f64,
    pub poi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub kind: LayerKind,
    pub rows: usize,
    pub mean_delta_psnr: f64,
    pub mean_poi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeTable {
    /// Selector-major, then seed.
    pub rows: Vec<ProbeResult>,
    pub by_kind: Vec<KindSummary>,
}

/// Reset each selector under each seed and compare PSNR against references
/// (`I_max = 1`).
pub fn probe_sweep<M: Enhancer>(
    model: &M,
    selectors: &[LayerSelector],
    low: &[Tensor],
    refs: &[Tensor],
    seeds: &[u64],
) -> Result<ProbeTable> {
    check_pairs(low, refs)?;
    if selectors.is_empty() || seeds.is_empty() {
        return Err(Error::Contract("probe sweep needs selectors and seeds".into()));
    }
    let before = psnr_against(&infer_all(model, low)?, refs, DEFAULT_I_MAX)?;
    let jobs: Vec<(usize, u64)> = (0..selectors.len())
        .flat_map(|i| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let rows = ordered_map(&jobs, |_, &(i, seed)| {
        let sel = &selectors[i];
        let reset_count = sel.resolve(model)?.iter().map(|(_, n)| n).sum();
        let mut rng = Rng::new(child_seed(seed, i as u64));
        let probed = reset_layer(model, sel, &mut rng)?;
        let mut after = Vec::with_capacity(low.len());
        for (x, r) in low.iter().zip(refs) {
            after.push(psnr(&probed.infer(x)?, r, DEFAULT_I_MAX)?);
        }
        let delta: f64 = after.iter().zip(&before).map(|(a, b)| a - b).sum();
        Ok(ProbeResult {
            selector: sel.clone(),
            seed,
            reset_count,
            delta_psnr_mean: delta / low.len() as f64,
            poi: improvement_fraction(&before, &after),
            psnr_before: before.clone(),
            psnr_after: after,
        })
    })?;
    let by_kind = LayerKind::ALL
        .into_iter()
        .filter_map(|kind| {
            let group: Vec<&ProbeResult> = rows.iter().filter(|r| r.selector.kind == kind).collect();
            if group.is_empty() {
                return None;
            }
            let k = group.len() as f64;
            Some(KindSummary {
                kind,
                rows: group.len(),
                mean_delta_psnr: group.iter().map(|r| r.delta_psnr_mean).sum::<f64>() / k,
                mean_poi: group.iter().map(|r| r.poi).sum::<f64>() / k,
            })
        })
        .collect();
    Ok(ProbeTable { rows, by_kind })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ToyEnhancer};
    use crate::params::{ParamRole, ParamVars, Parameterized};
    use crate::numerics::{Tape, Var};

    /// `y = clamp(a ⊙ x + c, 0, 1)` with an extra parameter that is never read.
    #[derive(Debug, Clone, PartialEq)]
    struct Affine {
        a: Tensor,
        c: Tensor,
        unused: Tensor,
    }

    impl Parameterized for Affine {
        fn visit(&self, p: &str, f: &mut dyn FnMut(&str, ParamRole, &Tensor)) {
            let _ = p;
            f("a", ParamRole::Weight { fan_in: 1 }, &self.a);
            f("c", ParamRole::Bias, &self.c);
            f("unused", ParamRole::Weight { fan_in: 4 }, &self.unused);
        }
        fn visit_mut(&mut self, p: &str, f: &mut dyn FnMut(&str, ParamRole, &mut Tensor)) {
            let _ = p;
            f("a", ParamRole::Weight { fan_in: 1 }, &mut self.a);
            f("c", ParamRole::Bias, &mut self.c);
            f("unused", ParamRole::Weight { fan_in: 4 }, &mut self.unused);
        }
    }

    impl Enhancer for Affine {
        fn forward_on(&self, tape: &mut Tape, pv: &ParamVars, x: Var) -> Result<Var> {
            let a = pv.get("a")?;
            let c = pv.get("c")?;
            let y = tape.mul(a, x)?;
            let y = tape.add(y, c)?;
            Ok(tape.clamp(y, 0.0, 1.0))
        }
    }

    fn affine() -> Affine {
        Affine {
            a: Tensor::full(&[1, 2, 2], 0.9),
            c: Tensor::full(&[1, 2, 2], 0.05),
            unused: Tensor::full(&[4], 0.3),
        }
    }

    fn images(seed: u64, count: usize) -> Vec<Tensor> {
        let mut rng = Rng::new(seed);
        (0..count)
            .map(|_| Tensor::from_fn(&[1, 2, 2], |_| rng.uniform(0.0, 1.0)))
            .collect()
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::zeros(&[1, 1, 1]);
        let b = Tensor::full(&[1, 1, 1], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&b, &b, 1.0).unwrap(), PSNR_CAP);
        let c = Tensor::full(&[1, 1, 1], 1.0);
        assert!((psnr(&a, &c, 255.0).unwrap() - 48.1308).abs() < 1e-3);
        assert!(psnr(&a, &Tensor::zeros(&[2]), 1.0).is_err());
        assert!(psnr(&a, &b, 0.0).is_err());
    }

    #[test]
    fn psnr_is_monotone_in_mse() {
        let a = Tensor::zeros(&[4]);
        let mut last = f64::INFINITY;
        for k in 0..60 {
            let b = Tensor::full(&[4], 1e-9 * 1.5f64.powi(k));
            let p = psnr(&a, &b, 1.0).unwrap();
            assert!(p <= last && p <= PSNR_CAP);
            last = p;
        }
    }

    #[test]
    fn selector_parsing_and_matching() {
        let s: LayerSelector = "decoder.0.attn".parse().unwrap();
        assert_eq!(s.kind, LayerKind::Attention);
        assert!(s.matches("decoder.0.attn.q"));
        assert!(!s.matches("decoder.0.attnx.q"));
        assert!(!s.matches("decoder.0"));
        let s: LayerSelector = "decoder.1.conv:static".parse().unwrap();
        assert_eq!(s.kind, LayerKind::Static);
        assert_eq!(LayerKind::infer("decoder.0.attn.adr"), LayerKind::Dynamic);
        assert_eq!(LayerKind::infer("decoder.0.dynconv"), LayerKind::Dynamic);
        assert_eq!(LayerKind::infer("decoder.0.conv"), LayerKind::Feedforward);
        assert!("x:bogus".parse::<LayerSelector>().is_err());
        assert!(parse_selectors(" , ").unwrap().is_empty());
    }

    #[test]
    fn reset_touches_only_selected_group() {
        let m = ToyEnhancer::new(ModelConfig::default()).unwrap();
        let sel = LayerSelector::inferred("decoder.1.attn");
        let a = reset_layer(&m, &sel, &mut Rng::new(3)).unwrap();
        let b = reset_layer(&m, &sel, &mut Rng::new(3)).unwrap();
        assert_eq!(a, b);
        let (orig, new) = (m.named_params(), a.named_params());
        let mut changed = 0.0f64;
        for ((n, _, t0), (_, _, t1)) in orig.iter().zip(&new) {
            if sel.matches(n) {
                changed = changed.max(t0.max_abs_diff(t1));
            } else {
                assert!(t0.bit_eq(t1), "{n} changed");
            }
        }
        assert!(changed > 0.0);
        let miss = LayerSelector::inferred("decoder.7");
        assert!(matches!(reset_layer(&m, &miss, &mut Rng::new(0)), Err(Error::Selector(_))));
    }

    #[test]
    fn decoder_selectors_cover_groups() {
        let cfg = ModelConfig {
            adr_enabled: [true, false],
            adr: crate::model::AdrSettings { d_m: 4, d_e: 8, d_k: 3 },
            ..ModelConfig::default()
        };
        let m = ToyEnhancer::new(cfg).unwrap();
        let paths: Vec<String> = decoder_selectors(&m).into_iter().map(|s| s.path).collect();
        assert_eq!(
            paths,
            [
                "decoder.0.conv",
                "decoder.0.attn.q",
                "decoder.0.attn.k",
                "decoder.0.attn.v",
                "decoder.0.attn.temperature",
                "decoder.0.attn.adr",
                "decoder.0.attn.out",
                "decoder.1.conv",
                "decoder.1.attn.q",
                "decoder.1.attn.k",
                "decoder.1.attn.v",
                "decoder.1.attn.temperature",
                "decoder.1.attn.out",
            ]
        );
    }

    #[test]
    fn dead_parameter_gives_capped_dmr() {
        let m = affine();
        let sel = [LayerSelector::inferred("unused")];
        let r = dmr(&m, &sel, &images(1, 3), 9, 1.0).unwrap();
        assert!(r.terms.iter().flatten().all(|&t| t == PSNR_CAP));
        assert_eq!(r.dmr, PSNR_CAP);
    }

    #[test]
    fn single_term_dmr() {
        let m = affine();
        let sel = [LayerSelector::inferred("a")];
        let imgs = images(2, 1);
        let r = dmr(&m, &sel, &imgs, 4, 1.0).unwrap();
        let probed = reset_layer(&m, &sel[0], &mut Rng::new(child_seed(4, 0))).unwrap();
        let t = psnr(&m.infer(&imgs[0]).unwrap(), &probed.infer(&imgs[0]).unwrap(), 1.0).unwrap();
        assert_eq!(r.dmr, t);
        assert!(dmr(&m, &[], &imgs, 0, 1.0).is_err());
        assert!(dmr(&m, &sel, &[], 0, 1.0).is_err());
    }

    #[test]
    fn dmr_is_reproducible_and_pure() {
        let m = affine();
        let before = m.clone();
        let sel = [LayerSelector::inferred("a"), LayerSelector::inferred("c")];
        let imgs = images(3, 4);
        let a = dmr(&m, &sel, &imgs, 11, 1.0).unwrap();
        let b = dmr(&m, &sel, &imgs, 11, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, before);
    }

    #[test]
    fn poi_ties_and_improvements() {
        let m = affine();
        let low = images(4, 4);
        let refs: Vec<Tensor> = low.iter().map(|x| m.infer(x).unwrap()).collect();
        let unused = LayerSelector::inferred("unused");
        assert_eq!(poi(&m, &unused, &low, &refs, 1, 1.0).unwrap(), 0.0);

        // References equal to the output after resetting `c` to zero: every
        // image improves.
        let sel = LayerSelector::inferred("c");
        let reset = reset_layer(&m, &sel, &mut Rng::new(5)).unwrap();
        let refs: Vec<Tensor> = low.iter().map(|x| reset.infer(x).unwrap()).collect();
        assert_eq!(poi(&m, &sel, &low, &refs, 5, 1.0).unwrap(), 1.0);
        assert!(poi(&m, &sel, &low, &refs[..2], 5, 1.0).is_err());
    }

    #[test]
    fn poi_mixed_case_matches_per_image_comparison() {
        let m = affine();
        let low = images(6, 4);
        let mut rng = Rng::new(7);
        let refs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::from_fn(&[1, 2, 2], |_| rng.uniform(0.0, 1.0)))
            .collect();
        let sel = LayerSelector::inferred("a");
        let probed = reset_layer(&m, &sel, &mut Rng::new(8)).unwrap();
        let mut better = 0;
        for (x, r) in low.iter().zip(&refs) {
            let e0 = ops::mse(&m.infer(x).unwrap(), r).unwrap();
            let e1 = ops::mse(&probed.infer(x).unwrap(), r).unwrap();
            if e1 < e0 {
                better += 1;
            }
        }
        assert_eq!(poi(&m, &sel, &low, &refs, 8, 1.0).unwrap(), better as f64 / 4.0);
    }

    #[test]
    fn sweep_rows_match_recomputation() {
        let m = affine();
        let low = images(9, 3);
        let mut rng = Rng::new(10);
        let refs: Vec<Tensor> = (0..3)
            .map(|_| Tensor::from_fn(&[1, 2, 2], |_| rng.uniform(0.0, 1.0)))
            .collect();
        let sels = [
            LayerSelector::inferred("a"),
            LayerSelector::new("c", LayerKind::Static),
            LayerSelector::inferred("unused"),
        ];
        let table = probe_sweep(&m, &sels, &low, &refs, &[3, 4]).unwrap();
        assert_eq!(table.rows.len(), 6);
        for (row_idx, row) in table.rows.iter().enumerate() {
            let i = row_idx / 2;
            assert_eq!(row.selector, sels[i]);
            let probed = reset_layer(&m, &sels[i], &mut Rng::new(child_seed(row.seed, i as u64))).unwrap();
            let mut delta = 0.0;
            for (j, (x, r)) in low.iter().zip(&refs).enumerate() {
                let b = psnr(&m.infer(x).unwrap(), r, 1.0).unwrap();
                let a = psnr(&probed.infer(x).unwrap(), r, 1.0).unwrap();
                assert_eq!(row.psnr_before[j], b);
                assert_eq!(row.psnr_after[j], a);
                delta += a - b;
            }
            assert!((row.delta_psnr_mean - delta / 3.0).abs() < 1e-12);
            let expected_poi = poi(&m, &sels[i], &low, &refs, child_seed(row.seed, i as u64), 1.0).unwrap();
            assert_eq!(row.poi, expected_poi);
        }
        let unused_rows = &table.rows[4..];
        assert!(unused_rows.iter().all(|r| r.delta_psnr_mean == 0.0 && r.poi == 0.0));
        assert_eq!(table.by_kind.len(), 2);
    }
}
