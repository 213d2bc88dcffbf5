//! Bivariate polynomial height-field models `z = P(x, y)` fitted to point
//! clouds by linear least squares.
//!
//! Two bases are supported: the full tensor grid `i <= dx, j <= dy` used by
//! the model sweep, and the total-degree capped basis `i + j <= cap` used for
//! the production fit (poly55 capped at 5 has 21 terms). Coordinates are
//! centered and scaled to [-1, 1] per axis before fitting, and the system is
//! solved with a Householder QR factorization rather than normal equations.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SurfaceError {
    #[error("degrees ({dx}, {dy}) outside [1, 10]")]
    BadDegree { dx: u32, dy: u32 },
    #[error("cannot fit {basis} coefficients: {points} points, rank deficient or underdetermined")]
    RankDeficient { basis: usize, points: usize },
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("no model below the RMSE ceiling of {ceiling} mm")]
    NoneUnderCeiling { ceiling: f64 },
    #[error("invalid surface: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, SurfaceError>;

pub const MAX_DEGREE: u32 = 10;
/// Timing repetitions per model; the median is reported.
pub const TIMING_REPEATS: usize = 3;
/// Default sub-millimeter acceptance ceiling for model selection.
pub const DEFAULT_RMSE_CEILING_MM: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl DomainBox {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

/// Monomial exponents `(i, j)` of a basis, `i`-major.
pub fn basis_terms(dx: u32, dy: u32, cap: Option<u32>) -> Vec<(u32, u32)> {
    let mut terms = Vec::new();
    for i in 0..=dx {
        for j in 0..=dy {
            if cap.is_none_or(|c| i + j <= c) {
                terms.push((i, j));
            }
        }
    }
    terms
}

pub fn model_id(dx: u32, dy: u32) -> String {
    format!("poly{dx}{dy}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolySurface {
    degree_x: u32,
    degree_y: u32,
    total_degree_cap: Option<u32>,
    /// Coefficients in `basis_terms` order, over normalized coordinates.
    coefficients: Vec<f64>,
    center: [f64; 2],
    scale: [f64; 2],
    domain: DomainBox,
}

impl PolySurface {
    pub fn new(
        degree_x: u32,
        degree_y: u32,
        total_degree_cap: Option<u32>,
        coefficients: Vec<f64>,
        center: [f64; 2],
        scale: [f64; 2],
        domain: DomainBox,
    ) -> Result<Self> {
        let s = PolySurface { degree_x, degree_y, total_degree_cap, coefficients, center, scale, domain };
        s.validate()?;
        Ok(s)
    }

    /// Constant surface `z = c` over the given domain.
    pub fn constant(c: f64, domain: DomainBox) -> Self {
        let center = [(domain.x_min + domain.x_max) / 2.0, (domain.y_min + domain.y_max) / 2.0];
        let mut coefficients = vec![0.0; 4];
        coefficients[0] = c;
        PolySurface {
            degree_x: 1,
            degree_y: 1,
            total_degree_cap: None,
            coefficients,
            center,
            scale: [1.0, 1.0],
            domain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = basis_terms(self.degree_x, self.degree_y, self.total_degree_cap).len();
        if self.coefficients.len() != n {
            return Err(SurfaceError::Invalid(format!(
                "{} coefficients for a {n}-term basis",
                self.coefficients.len()
            )));
        }
        if !(self.scale[0] > 0.0 && self.scale[1] > 0.0) {
            return Err(SurfaceError::Invalid("normalization scales must be positive".into()));
        }
        if self.coefficients.iter().chain(&self.center).any(|v| !v.is_finite()) {
            return Err(SurfaceError::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn degree_x(&self) -> u32 {
        self.degree_x
    }

    pub fn degree_y(&self) -> u32 {
        self.degree_y
    }

    pub fn total_degree_cap(&self) -> Option<u32> {
        self.total_degree_cap
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn coefficient_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn domain(&self) -> &DomainBox {
        &self.domain
    }

    pub fn normalization(&self) -> ([f64; 2], [f64; 2]) {
        (self.center, self.scale)
    }

    pub fn model_id(&self) -> String {
        model_id(self.degree_x, self.degree_y)
    }

    pub fn terms(&self) -> Vec<(u32, u32)> {
        basis_terms(self.degree_x, self.degree_y, self.total_degree_cap)
    }

    /// `a_ij` over normalized coordinates, if the term is in the basis.
    pub fn coefficient(&self, i: u32, j: u32) -> Option<f64> {
        self.terms().iter().position(|&t| t == (i, j)).map(|k| self.coefficients[k])
    }

    fn max_j(&self, i: u32) -> u32 {
        match self.total_degree_cap {
            Some(c) => self.degree_y.min(c.saturating_sub(i)),
            None => self.degree_y,
        }
    }

    /// Nested Horner evaluation in normalized coordinates.
    #[inline]
    pub fn evaluate(&self, x: f64, y: f64) -> f64 {
        let xn = (x - self.center[0]) / self.scale[0];
        let yn = (y - self.center[1]) / self.scale[1];
        // Row i of the coefficient list starts at offsets[i].
        let mut offsets = [0usize; MAX_DEGREE as usize + 2];
        let mut rows = 0;
        for i in 0..=self.degree_x {
            if self.total_degree_cap.is_some_and(|c| i > c) {
                break;
            }
            offsets[i as usize + 1] = offsets[i as usize] + self.max_j(i) as usize + 1;
            rows = i as usize + 1;
        }
        let mut acc = 0.0;
        for i in (0..rows).rev() {
            let row = &self.coefficients[offsets[i]..offsets[i + 1]];
            let inner = row.iter().rev().fold(0.0, |a, c| a * yn + c);
            acc = acc * xn + inner;
        }
        acc
    }

    /// Evaluation plus a flag telling whether (x, y) lies inside the fit domain.
    pub fn evaluate_checked(&self, x: f64, y: f64) -> (f64, bool) {
        (self.evaluate(x, y), self.domain.contains(x, y))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("surface serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: PolySurface =
            serde_json::from_str(text).map_err(|e| SurfaceError::Invalid(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub model_id: String,
    pub degree_x: u32,
    pub degree_y: u32,
    pub total_degree_cap: Option<u32>,
    pub coeff_count: usize,
    pub rmse: f64,
    pub fit_time_s: f64,
    /// Ratio of largest to smallest |R_ii| of the QR factor.
    pub condition: f64,
    /// Set when the fit failed; `rmse` is then infinite.
    pub error: Option<String>,
}

impl FitReport {
    pub fn is_ok(&self) -> bool {
        self.error.is_none() && self.rmse.is_finite()
    }
}

fn check_degrees(dx: u32, dy: u32) -> Result<()> {
    if (1..=MAX_DEGREE).contains(&dx) && (1..=MAX_DEGREE).contains(&dy) {
        Ok(())
    } else {
        Err(SurfaceError::BadDegree { dx, dy })
    }
}

fn fit_inner(cloud: &PointCloud, dx: u32, dy: u32, cap: Option<u32>) -> Result<(PolySurface, f64)> {
    check_degrees(dx, dy)?;
    let terms = basis_terms(dx, dy, cap);
    let n = terms.len();
    let m = cloud.len();
    if m < n {
        return Err(SurfaceError::RankDeficient { basis: n, points: m });
    }
    let (lo, hi) = cloud.bounds().ok_or(SurfaceError::EmptyCloud)?;
    let center = [(lo.x + hi.x) / 2.0, (lo.y + hi.y) / 2.0];
    let scale = [(hi.x - lo.x) / 2.0, (hi.y - lo.y) / 2.0];
    if !(scale[0] > 0.0 && scale[1] > 0.0) {
        return Err(SurfaceError::RankDeficient { basis: n, points: m });
    }

    let mut a = DMatrix::<f64>::zeros(m, n);
    let mut b = DVector::<f64>::zeros(m);
    let mut xp = [0.0f64; MAX_DEGREE as usize + 1];
    let mut yp = [0.0f64; MAX_DEGREE as usize + 1];
    for (r, p) in cloud.points().iter().enumerate() {
        let xn = (p.x - center[0]) / scale[0];
        let yn = (p.y - center[1]) / scale[1];
        xp[0] = 1.0;
        yp[0] = 1.0;
        for k in 1..=MAX_DEGREE as usize {
            xp[k] = xp[k - 1] * xn;
            yp[k] = yp[k - 1] * yn;
        }
        for (c, &(i, j)) in terms.iter().enumerate() {
            a[(r, c)] = xp[i as usize] * yp[j as usize];
        }
        b[r] = p.z;
    }

    let qr = a.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..n).map(|i| r[(i, i)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let dmin = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(dmin > dmax * 1e-13 * n as f64) {
        return Err(SurfaceError::RankDeficient { basis: n, points: m });
    }
    qr.q_tr_mul(&mut b);
    let rhs = b.rows(0, n).into_owned();
    let coef = r
        .solve_upper_triangular(&rhs)
        .ok_or(SurfaceError::RankDeficient { basis: n, points: m })?;

    let surface = PolySurface {
        degree_x: dx,
        degree_y: dy,
        total_degree_cap: cap,
        coefficients: coef.iter().copied().collect(),
        center,
        scale,
        domain: DomainBox { x_min: lo.x, x_max: hi.x, y_min: lo.y, y_max: hi.y },
    };
    Ok((surface, dmax / dmin))
}

/// Least-squares fit of `z` against `(x, y)`.
pub fn fit_poly(cloud: &PointCloud, degree_x: u32, degree_y: u32, cap: Option<u32>) -> Result<PolySurface> {
    fit_inner(cloud, degree_x, degree_y, cap).map(|(s, _)| s)
}

/// Root mean squared vertical residual of `cloud` against `surface`.
pub fn rmse(surface: &PolySurface, cloud: &PointCloud) -> Result<f64> {
    if cloud.is_empty() {
        return Err(SurfaceError::EmptyCloud);
    }
    let ss: f64 = cloud
        .points()
        .iter()
        .map(|p| {
            let r = p.z - surface.evaluate(p.x, p.y);
            r * r
        })
        .sum();
    Ok((ss / cloud.len() as f64).sqrt())
}

/// Fits one model, timing `repeats` runs and reporting the median.
pub fn fit_with_report(
    cloud: &PointCloud,
    dx: u32,
    dy: u32,
    cap: Option<u32>,
    repeats: usize,
) -> (Option<PolySurface>, FitReport) {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut result = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        let r = fit_inner(cloud, dx, dy, cap);
        times.push(start.elapsed().as_secs_f64().max(1e-9));
        result = Some(r);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let fit_time_s = times[times.len() / 2];
    let coeff_count = basis_terms(dx, dy, cap).len();
    let mut report = FitReport {
        model_id: model_id(dx, dy),
        degree_x: dx,
        degree_y: dy,
        total_degree_cap: cap,
        coeff_count,
        rmse: f64::INFINITY,
        fit_time_s,
        condition: f64::INFINITY,
        error: None,
    };
    match result.expect("at least one run") {
        Ok((surface, condition)) => {
            report.rmse = rmse(&surface, cloud).expect("cloud is non-empty after a fit");
            report.condition = condition;
            (Some(surface), report)
        }
        Err(e) => {
            report.error = Some(e.to_string());
            (None, report)
        }
    }
}

/// Fits every uncapped model `polyDxDy`, 1 <= dx, dy <= max_degree, in
/// parallel; reports come back ordered by (dx, dy).
pub fn sweep_models(cloud: &PointCloud, max_degree: u32) -> Result<Vec<FitReport>> {
    if !(1..=MAX_DEGREE).contains(&max_degree) {
        return Err(SurfaceError::BadDegree { dx: max_degree, dy: max_degree });
    }
    let pairs: Vec<(u32, u32)> =
        (1..=max_degree).flat_map(|dx| (1..=max_degree).map(move |dy| (dx, dy))).collect();
    Ok(pairs
        .par_iter()
        .map(|&(dx, dy)| fit_with_report(cloud, dx, dy, None, TIMING_REPEATS).1)
        .collect())
}

/// Non-dominated reports under minimize(rmse, fit time), in input order.
/// Failed fits never enter the front.
pub fn pareto_front(reports: &[FitReport]) -> Vec<FitReport> {
    let mut order: Vec<usize> = (0..reports.len()).filter(|&i| reports[i].is_ok()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (&reports[a], &reports[b]);
        ra.rmse
            .partial_cmp(&rb.rmse)
            .unwrap_or(Ordering::Equal)
            .then(ra.fit_time_s.partial_cmp(&rb.fit_time_s).unwrap_or(Ordering::Equal))
    });
    let mut keep = vec![false; reports.len()];
    // Minimum time among all earlier entries, and among earlier entries with
    // strictly smaller rmse.
    let mut min_all = f64::INFINITY;
    let mut min_strict = f64::INFINITY;
    let mut group_rmse = f64::NAN;
    let mut group_min = f64::INFINITY;
    for &i in &order {
        let r = &reports[i];
        if r.rmse != group_rmse {
            min_strict = min_strict.min(group_min);
            group_rmse = r.rmse;
            group_min = f64::INFINITY;
        }
        let dominated = min_all < r.fit_time_s || min_strict <= r.fit_time_s;
        keep[i] = !dominated;
        min_all = min_all.min(r.fit_time_s);
        group_min = group_min.min(r.fit_time_s);
    }
    reports.iter().zip(keep).filter(|(_, k)| *k).map(|(r, _)| r.clone()).collect()
}

/// Cheapest Pareto-optimal model with rmse strictly below `rmse_ceiling`.
/// Ties go to fewer coefficients, then the lexicographically smaller id.
pub fn select_default(reports: &[FitReport], rmse_ceiling: f64) -> Result<String> {
    pareto_front(reports)
        .into_iter()
        .filter(|r| r.rmse < rmse_ceiling)
        .min_by(|a, b| {
            a.fit_time_s
                .partial_cmp(&b.fit_time_s)
                .unwrap_or(Ordering::Equal)
                .then(a.coeff_count.cmp(&b.coeff_count))
                .then(a.model_id.cmp(&b.model_id))
        })
        .map(|r| r.model_id)
        .ok_or(SurfaceError::NoneUnderCeiling { ceiling: rmse_ceiling })
}

/// CSV with header `model_id,degree_x,degree_y,coeff_count,rmse_mm,fit_time_s`,
/// plus a trailing `pareto` column (0/1) when `mark_front` is set.
pub fn reports_to_csv(reports: &[FitReport], mark_front: bool) -> String {
    let front: Vec<String> = if mark_front {
        pareto_front(reports).into_iter().map(|r| r.model_id).collect()
    } else {
        Vec::new()
    };
    let mut out = String::from("model_id,degree_x,degree_y,coeff_count,rmse_mm,fit_time_s");
    if mark_front {
        out.push_str(",pareto");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.model_id, r.degree_x, r.degree_y, r.coeff_count, r.rmse, r.fit_time_s
        );
        if mark_front {
            let _ = write!(out, ",{}", u8::from(front.contains(&r.model_id)));
        }
        out.push('\n');
    }
    out
}

/// RMS height difference of two surfaces over an `n x n` grid spanning the
/// intersection of their domains. This is the whole-surface variant of the
/// consistency check.
pub fn surface_consistency_rmse(a: &PolySurface, b: &PolySurface, n: usize) -> Result<f64> {
    let (da, db) = (a.domain(), b.domain());
    let x0 = da.x_min.max(db.x_min);
    let x1 = da.x_max.min(db.x_max);
    let y0 = da.y_min.max(db.y_min);
    let y1 = da.y_max.min(db.y_max);
    if !(x1 > x0 && y1 > y0) || n < 2 {
        return Err(SurfaceError::Invalid("surface domains do not overlap".into()));
    }
    let mut ss = 0.0;
    for iy in 0..n {
        for ix in 0..n {
            let x = x0 + (x1 - x0) * ix as f64 / (n - 1) as f64;
            let y = y0 + (y1 - y0) * iy as f64 / (n - 1) as f64;
            let d = a.evaluate(x, y) - b.evaluate(x, y);
            ss += d * d;
        }
    }
    Ok((ss / (n * n) as f64).sqrt())
}
