//! Classification metrics and the rank-2 projection used to compare domains.

use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};

/// Rows are ground truth, columns predictions, classes `1..=k` at index `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Contract("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }
}

/// Tallies `(truth, pred)` pairs, skipping unlabeled truth entries.
pub fn confusion(truth: &[u16], pred: &[u16], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::shape("confusion", &[truth.len()], &[pred.len()]));
    }
    let mut cm = ConfusionMatrix::new(k);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == 0 {
            continue;
        }
        if t as usize > k || p == 0 || p as usize > k {
            return Err(Error::Contract(format!("label pair ({t}, {p}) outside 1..={k}")));
        }
        cm.counts[(t as usize - 1) * k + p as usize - 1] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub oa: f64,
    pub aa: f64,
    /// NaN when chance agreement is 1.
    pub kappa: f64,
    /// Classes (1-based) without ground-truth samples, left out of AA.
    pub excluded: Vec<usize>,
}

impl Accuracy {
    /// `OA 91.55 AA 90.12 Kappa 88.40` in percent.
    pub fn report(&self) -> String {
        format!(
            "OA {:.2} AA {:.2} Kappa {:.2}",
            100.0 * self.oa,
            100.0 * self.aa,
            100.0 * self.kappa
        )
    }
}

pub fn oa_aa_kappa(cm: &ConfusionMatrix) -> Result<Accuracy> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("no evaluated samples".into()));
    }
    let k = cm.k;
    let tf = total as f64;
    let trace: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    let oa = trace as f64 / tf;
    let mut recalls = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    let mut pe = 0.0;
    for i in 0..k {
        let row: u64 = (0..k).map(|j| cm.get(i, j)).sum();
        let col: u64 = (0..k).map(|j| cm.get(j, i)).sum();
        pe += row as f64 * col as f64;
        if row == 0 {
            excluded.push(i + 1);
        } else {
            recalls.push(cm.get(i, i) as f64 / row as f64);
        }
    }
    if !excluded.is_empty() {
        warn!("classes {excluded:?} have no samples; excluded from AA");
    }
    let pe = pe / (tf * tf);
    let kappa = if pe >= 1.0 {
        warn!("chance agreement is 1; kappa undefined");
        f64::NAN
    } else {
        (oa - pe) / (1.0 - pe)
    };
    Ok(Accuracy {
        oa,
        aa: recalls.iter().sum::<f64>() / recalls.len() as f64,
        kappa,
        excluded,
    })
}

/// Right singular vectors (columns of `v`, row-major `d×d`) and singular
/// values in descending order, by one-sided Jacobi rotations.
#[derive(Clone, Debug)]
pub struct Svd {
    pub singular_values: Vec<f64>,
    pub v: Vec<f64>,
    pub d: usize,
}

impl Svd {
    pub fn vector(&self, j: usize) -> Vec<f64> {
        (0..self.d).map(|i| self.v[i * self.d + j]).collect()
    }
}

/// Thin SVD of an `n×d` row-major matrix.
pub fn jacobi_svd(a: &[f64], n: usize, d: usize) -> Svd {
    // Column-major working copy so each rotation touches contiguous columns.
    let mut cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| a[i * d + j]).collect()).collect();
    let mut v = vec![0.0; d * d];
    (0..d).for_each(|i| v[i * d + i] = 1.0);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..d {
            for q in p + 1..d {
                let (alpha, beta, gamma) = cols[p]
                    .iter()
                    .zip(&cols[q])
                    .fold((0.0, 0.0, 0.0), |(a, b, g), (&x, &y)| (a + x * x, b + y * y, g + x * y));
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
                for i in 0..d {
                    let (xp, yq) = (v[i * d + p], v[i * d + q]);
                    v[i * d + p] = c * xp - s * yq;
                    v[i * d + q] = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]));
    let mut sorted = vec![0.0; d * d];
    for (new, &old) in order.iter().enumerate() {
        for i in 0..d {
            sorted[i * d + new] = v[i * d + old];
        }
    }
    Svd {
        singular_values: order.iter().map(|&j| norms[j]).collect(),
        v: sorted,
        d,
    }
}

/// Mean and top-2 principal axes fitted on a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection2d {
    pub mean: Vec<f64>,
    pub axes: [Vec<f64>; 2],
}

impl Projection2d {
    /// Fits on `points` (all of dimension `d ≥ 2`, at least two of them).
    pub fn fit(points: &[Vec<f64>]) -> Result<Self> {
        let n = points.len();
        let d = points.first().map_or(0, Vec::len);
        if n < 2 || d < 2 || points.iter().any(|p| p.len() != d) {
            return Err(Error::Contract(format!(
                "projection needs n ≥ 2 points of equal dimension d ≥ 2 (n={n}, d={d})"
            )));
        }
        let mut mean = vec![0.0; d];
        for p in points {
            mean.iter_mut().zip(p).for_each(|(m, x)| *m += x / n as f64);
        }
        let centered: Vec<f64> = points
            .iter()
            .flat_map(|p| p.iter().zip(&mean).map(|(x, m)| x - m))
            .collect();
        let svd = jacobi_svd(&centered, n, d);
        let scale = centered.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if svd.singular_values[0] <= 1e-12 * scale.max(f64::MIN_POSITIVE) || scale == 0.0 {
            return Err(Error::Contract("rank-0 input cannot be projected".into()));
        }
        let oriented = |mut u: Vec<f64>| {
            let big = u
                .iter()
                .copied()
                .fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            if big < 0.0 {
                u.iter_mut().for_each(|x| *x = -*x);
            }
            u
        };
        Ok(Projection2d {
            mean,
            axes: [oriented(svd.vector(0)), oriented(svd.vector(1))],
        })
    }

    pub fn project(&self, point: &[f64]) -> [f64; 2] {
        let dot = |axis: &[f64]| {
            point
                .iter()
                .zip(&self.mean)
                .zip(axis)
                .map(|((x, m), a)| (x - m) * a)
                .sum()
        };
        [dot(&self.axes[0]), dot(&self.axes[1])]
    }
}

/// Fits and applies the projection to the same points.
pub fn svd_project_2d(points: &[Vec<f64>]) -> Result<Vec<[f64; 2]>> {
    let proj = Projection2d::fit(points)?;
    Ok(points.iter().map(|p| proj.project(p)).collect())
}

/// Per class: distance between the source and target centroids divided by
/// the pooled per-axis standard deviation. Classes present in only one
/// domain, and unlabeled points, are skipped.
pub fn domain_overlap_score(
    source: &[[f64; 2]],
    source_labels: &[u16],
    target: &[[f64; 2]],
    target_labels: &[u16],
) -> Result<BTreeMap<u16, f64>> {
    if source.len() != source_labels.len() || target.len() != target_labels.len() {
        return Err(Error::Contract("each projection needs one label per point".into()));
    }
    let group = |pts: &[[f64; 2]], labels: &[u16]| {
        let mut m: BTreeMap<u16, Vec<[f64; 2]>> = BTreeMap::new();
        for (p, &l) in pts.iter().zip(labels) {
            if l > 0 {
                m.entry(l).or_default().push(*p);
            }
        }
        m
    };
    let (gs, gt) = (group(source, source_labels), group(target, target_labels));
    let centroid = |pts: &[[f64; 2]]| {
        let n = pts.len() as f64;
        pts.iter().fold([0.0, 0.0], |c, p| [c[0] + p[0] / n, c[1] + p[1] / n])
    };
    let sq_dev = |pts: &[[f64; 2]], c: [f64; 2]| {
        pts.iter()
            .map(|p| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2))
            .sum::<f64>()
    };
    let mut out = BTreeMap::new();
    for label in gs
        .keys()
        .chain(gt.keys())
        .copied()
        .collect::<std::collections::BTreeSet<_>>()
    {
        let (Some(s), Some(t)) = (gs.get(&label), gt.get(&label)) else {
            warn!("class {label} missing from one domain; excluded from overlap");
            continue;
        };
        let (cs, ct) = (centroid(s), centroid(t));
        let dist = ((cs[0] - ct[0]).powi(2) + (cs[1] - ct[1]).powi(2)).sqrt();
        let dof = (s.len() + t.len()).saturating_sub(2).max(1) as f64;
        let pooled = ((sq_dev(s, cs) + sq_dev(t, ct)) / (2.0 * dof)).sqrt();
        let score = if dist == 0.0 {
            0.0
        } else if pooled == 0.0 {
            f64::INFINITY
        } else {
            dist / pooled
        };
        out.insert(label, score);
    }
    Ok(out)
}
