//! Segmentation metrics: Dice, average symmetric surface distance and the
//! per-organ table with macro "Global" averages.

use std::collections::BTreeMap;

use ndarray::{Array3, ArrayView3, Zip};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::phantom::LabeledVolume;
use crate::segmodel::SegModel;

fn same_shape(a: &ArrayView3<'_, bool>, b: &ArrayView3<'_, bool>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(format!("mask shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

/// Dice similarity coefficient in `[0, 1]`.
///
/// Two empty masks score 1.0; exactly one empty mask scores 0.0.
pub fn dsc(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>) -> Result<f64> {
    same_shape(&pred, &gt)?;
    let mut inter = 0usize;
    let mut np = 0usize;
    let mut ng = 0usize;
    Zip::from(&pred).and(&gt).for_each(|&p, &g| {
        np += p as usize;
        ng += g as usize;
        inter += (p && g) as usize;
    });
    Ok(match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * inter as f64 / (np + ng) as f64,
    })
}

/// Foreground voxels with at least one background face neighbour. Outside
/// the array counts as background.
pub fn surface(mask: ArrayView3<'_, bool>) -> Array3<bool> {
    let (h, w, d) = mask.dim();
    Array3::from_shape_fn((h, w, d), |(i, j, k)| {
        if !mask[[i, j, k]] {
            return false;
        }
        let bg = |ii: isize, jj: isize, kk: isize| {
            ii < 0
                || jj < 0
                || kk < 0
                || ii >= h as isize
                || jj >= w as isize
                || kk >= d as isize
                || !mask[[ii as usize, jj as usize, kk as usize]]
        };
        let (i, j, k) = (i as isize, j as isize, k as isize);
        bg(i - 1, j, k) || bg(i + 1, j, k) || bg(i, j - 1, k) || bg(i, j + 1, k) || bg(i, j, k - 1) || bg(i, j, k + 1)
    })
}

/// 1D squared distance transform of `f` with sample spacing `step`
/// (lower envelope of parabolas). Infinite entries are not sites.
fn edt_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let w = step * step;
    v.clear();
    z.clear();
    for q in 0..f.len() {
        if !f[q].is_finite() {
            continue;
        }
        let fq = f[q] + w * (q * q) as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let fp = f[p] + w * (p * p) as f64;
                    let s = (fq - fp) / (2.0 * w * (q - p) as f64);
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..f.len() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        out.push(w * dq * dq + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest
/// `true` voxel of `sites`. Infinite everywhere when `sites` is empty.
pub fn squared_distance_transform(sites: ArrayView3<'_, bool>, spacing: [f32; 3]) -> Array3<f64> {
    let mut dist = sites.map(|&s| if s { 0.0 } else { f64::INFINITY });
    let mut buf = Vec::new();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    for axis in 0..3 {
        for mut lane in dist.lanes_mut(ndarray::Axis(axis)) {
            buf.clear();
            buf.extend(lane.iter().copied());
            edt_1d(&mut buf, spacing[axis] as f64, &mut v, &mut z, &mut out);
            for (dst, src) in lane.iter_mut().zip(&buf) {
                *dst = *src;
            }
        }
    }
    dist
}

/// Average symmetric surface distance in mm.
pub fn asd(pred: ArrayView3<'_, bool>, gt: ArrayView3<'_, bool>, spacing: [f32; 3]) -> Result<f64> {
    same_shape(&pred, &gt)?;
    if !pred.iter().any(|&b| b) || !gt.iter().any(|&b| b) {
        return Err(Error::UndefinedMetric("surface distance of an empty mask".into()));
    }
    let sp = surface(pred);
    let sg = surface(gt);
    let to_gt = squared_distance_transform(sg.view(), spacing);
    let to_pred = squared_distance_transform(sp.view(), spacing);
    let directed = |s: &Array3<bool>, d: &Array3<f64>| {
        let (mut total, mut count) = (0.0, 0usize);
        Zip::from(s).and(d).for_each(|&on, &d2| {
            if on {
                total += d2.sqrt();
                count += 1;
            }
        });
        (total, count)
    };
    // each direction summed on its own so swapping the arguments is bit-exact
    let (a, na) = directed(&sp, &to_gt);
    let (b, nb) = directed(&sg, &to_pred);
    Ok((a + b) / (na + nb) as f64)
}

/// Per-organ DSC (percent) and ASD (mm) with macro averages.
///
/// Organs are keyed by class id. An organ missing from `asd` had no defined
/// surface distance on any volume and is listed in `missing_asd`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct MetricTable {
    pub dsc: BTreeMap<u8, f64>,
    pub asd: BTreeMap<u8, f64>,
    pub missing_asd: Vec<u8>,
    pub global_dsc: f64,
    pub global_asd: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricTable {
    /// Build a table from per-organ values, computing the macro means.
    pub fn from_organs(dsc: BTreeMap<u8, f64>, asd: BTreeMap<u8, f64>) -> Self {
        let missing_asd = dsc.keys().filter(|k| !asd.contains_key(k)).copied().collect();
        let global_dsc = mean(dsc.values().copied()).unwrap_or(0.0);
        let global_asd = mean(asd.values().copied());
        MetricTable { dsc, asd, missing_asd, global_dsc, global_asd }
    }

    /// Macro mean of several tables, organ by organ.
    pub fn average(tables: &[MetricTable]) -> MetricTable {
        let mut d: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        let mut a: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
        for t in tables {
            for (&k, &v) in &t.dsc {
                d.entry(k).or_default().push(v);
            }
            for (&k, &v) in &t.asd {
                a.entry(k).or_default().push(v);
            }
        }
        let collapse = |m: BTreeMap<u8, Vec<f64>>| -> BTreeMap<u8, f64> {
            m.into_iter().map(|(k, v)| (k, mean(v.into_iter()).unwrap_or(0.0))).collect()
        };
        MetricTable::from_organs(collapse(d), collapse(a))
    }
}

/// Per-volume metrics for every organ present in the ground truth.
fn volume_metrics(pred: &Array3<u8>, gt: &Array3<u8>, spacing: [f32; 3], classes: usize) -> Vec<(u8, f64, Option<f64>)> {
    let mut out = Vec::new();
    for c in 1..classes as u8 {
        let g = gt.mapv(|l| l == c);
        if !g.iter().any(|&b| b) {
            continue;
        }
        let p = pred.mapv(|l| l == c);
        let d = dsc(p.view(), g.view()).expect("shapes match");
        let a = asd(p.view(), g.view(), spacing).ok();
        out.push((c, d, a));
    }
    out
}

/// Metrics from predicted label maps. Each organ is averaged over the volumes
/// whose ground truth contains it.
pub fn evaluate_predictions(pairs: &[(Array3<u8>, &LabeledVolume)], classes: usize) -> Result<MetricTable> {
    for (p, lv) in pairs {
        if p.shape() != lv.labels.shape() {
            return Err(invalid("prediction and label shapes differ"));
        }
    }
    let per_volume: Vec<_> = pairs
        .par_iter()
        .map(|(p, lv)| volume_metrics(p, &lv.labels, lv.volume.spacing(), classes))
        .collect();
    let mut d: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut a: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    for (c, dv, av) in per_volume.into_iter().flatten() {
        d.entry(c).or_default().push(100.0 * dv);
        if let Some(av) = av {
            a.entry(c).or_default().push(av);
        }
    }
    let collapse = |m: BTreeMap<u8, Vec<f64>>| -> BTreeMap<u8, f64> {
        m.into_iter().map(|(k, v)| (k, mean(v.into_iter()).unwrap_or(0.0))).collect()
    };
    Ok(MetricTable::from_organs(collapse(d), collapse(a)))
}

/// Argmax predictions of `model` on every volume, scored against its labels.
pub fn evaluate_model(model: &SegModel, data: &[LabeledVolume]) -> Result<MetricTable> {
    let preds: Vec<_> = data.par_iter().map(|lv| (model.predict_labels(lv.volume.data().view()), lv)).collect();
    evaluate_predictions(&preds, model.num_classes())
}
