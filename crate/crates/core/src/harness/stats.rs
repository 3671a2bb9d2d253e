//! Small statistics used by the experiment reports.

/// Mean and population standard deviation; `None` for an empty slice.
pub fn mean_std(v: &[f64]) -> Option<(f64, f64)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// 1-based ranks, ties sharing their average rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, _) = mean_std(a)?;
    let (mb, _) = mean_std(b)?;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    pearson(&ranks(a), &ranks(b))
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    sum.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

/// One-sample Kolmogorov–Smirnov test against the uniform distribution on
/// `[lo, hi]`, with Stephens' small-sample correction for the p-value.
pub fn ks_uniform(samples: &[f64], lo: f64, hi: f64) -> KsResult {
    let mut x: Vec<f64> = samples.iter().map(|s| ((s - lo) / (hi - lo)).clamp(0.0, 1.0)).collect();
    x.sort_by(f64::total_cmp);
    let n = x.len();
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &u) in x.iter().enumerate() {
        d = d.max((i as f64 + 1.0) / nf - u).max(u - i as f64 / nf);
    }
    let sn = nf.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_q((sn + 0.12 + 0.11 / sn) * d),
        n,
    }
}
