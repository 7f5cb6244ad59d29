//! Single-cell detection head: anchor boxes, softplus decoding, trajectory
//! correction by polynomial fitting, the training objective and mAP@0.5.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result, ScnnError};

pub const NUM_ANCHORS: usize = 5;
/// Raw outputs per anchor: `t_x, t_y, t_w, t_h`, confidence logit.
pub const PER_ANCHOR: usize = 5;
pub const HEAD_OUTPUTS: usize = NUM_ANCHORS * PER_ANCHOR;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub w: f64,
    pub h: f64,
}

/// Five square anchors log-spaced between 0.1 and 0.7 of the image side.
pub fn default_anchors() -> [Anchor; NUM_ANCHORS] {
    let (lo, hi) = (0.1f64.ln(), 0.7f64.ln());
    std::array::from_fn(|i| {
        let s = (lo + (hi - lo) * i as f64 / (NUM_ANCHORS - 1) as f64).exp();
        Anchor { w: s, h: s }
    })
}

/// Center-format box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BoxCoords {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoxCoords {
    pub const fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxPrediction {
    pub raw: [f64; PER_ANCHOR],
    pub bbox: BoxCoords,
    pub confidence: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^{βx}) / β` without overflow.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(ScnnError::InvalidArgument(format!(
            "softplus beta must be positive, got {beta}"
        )))
    }
}

pub fn decode_box(raw: &[f64; PER_ANCHOR], anchor: Anchor, beta: f64) -> Result<BoxPrediction> {
    check_beta(beta)?;
    Ok(BoxPrediction {
        raw: *raw,
        bbox: BoxCoords::new(
            sigmoid(raw[0]),
            sigmoid(raw[1]),
            anchor.w * softplus(raw[2], beta),
            anchor.h * softplus(raw[3], beta),
        ),
        confidence: sigmoid(raw[4]),
    })
}

/// Diagonal of the decode Jacobian: `∂(b_x, b_y, b_w, b_h, C)/∂raw`.
fn decode_derivs(raw: &[f64; PER_ANCHOR], anchor: Anchor, beta: f64) -> [f64; PER_ANCHOR] {
    let sx = sigmoid(raw[0]);
    let sy = sigmoid(raw[1]);
    let sc = sigmoid(raw[4]);
    [
        sx * (1.0 - sx),
        sy * (1.0 - sy),
        anchor.w * sigmoid(beta * raw[2]),
        anchor.h * sigmoid(beta * raw[3]),
        sc * (1.0 - sc),
    ]
}

// 1-D overlap of [a0, a1] and [b0, b1] and its derivative w.r.t. (center, size)
// of the first interval. At ties the interior side is taken.
fn overlap(ac: f64, aw: f64, bc: f64, bw: f64) -> (f64, f64, f64) {
    let (a0, a1) = (ac - aw / 2.0, ac + aw / 2.0);
    let (b0, b1) = (bc - bw / 2.0, bc + bw / 2.0);
    let len = a1.min(b1) - a0.max(b0);
    if len <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let hi = if a1 < b1 { 1.0 } else { 0.0 };
    let lo = if a0 > b0 { 1.0 } else { 0.0 };
    (len, hi - lo, 0.5 * (hi + lo))
}

pub fn iou(a: &BoxCoords, b: &BoxCoords) -> f64 {
    iou_with_grad(a, b).0
}

/// IOU and its gradient with respect to `a`'s `(cx, cy, w, h)`.
pub fn iou_with_grad(a: &BoxCoords, b: &BoxCoords) -> (f64, [f64; 4]) {
    let (ix, dix_c, dix_w) = overlap(a.cx, a.w, b.cx, b.w);
    let (iy, diy_c, diy_h) = overlap(a.cy, a.h, b.cy, b.h);
    let inter = ix * iy;
    let area_a = a.w * a.h;
    let union = area_a + b.w * b.h - inter;
    if inter <= 0.0 || union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let x = inter / union;
    let d_inter = [dix_c * iy, diy_c * ix, dix_w * iy, diy_h * ix];
    let d_area = [0.0, 0.0, a.h, a.w];
    // d(I/U) with dU = dA - dI
    let g = std::array::from_fn(|i| (d_inter[i] * (union + inter) - inter * d_area[i]) / (union * union));
    (x, g)
}

/// Least-squares fit of a polynomial in frame index, evaluated at the given
/// frames. Indices are mapped to [-1, 1] for conditioning.
pub fn polyfit(frames: &[f64], values: &[f64], degree: usize) -> Result<Vec<f64>> {
    check_dim(frames.len(), values.len())?;
    if degree >= frames.len() {
        return Err(ScnnError::InvalidArgument(format!(
            "polynomial degree {degree} needs more than {} points",
            frames.len()
        )));
    }
    let (lo, hi) = frames
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &f| (l.min(f), h.max(f)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let u: Vec<f64> = frames.iter().map(|&f| 2.0 * (f - lo) / span - 1.0).collect();
    let v = DMatrix::from_fn(u.len(), degree + 1, |i, j| u[i].powi(j as i32));
    let y = DVector::from_column_slice(values);
    let coef = v
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| ScnnError::InvalidArgument(e.to_string()))?;
    Ok((v * coef).iter().copied().collect())
}

/// Fits every coordinate channel of a track. Returns the corrected boxes and
/// `L_fit = Σ_frames Σ_coords (z - ẑ)²`.
pub fn polyfit_correct(track: &[BoxCoords], degree: usize) -> Result<(Vec<BoxCoords>, f64)> {
    let frames: Vec<f64> = (0..track.len()).map(|t| t as f64).collect();
    polyfit_track(&frames, track, degree)
}

fn polyfit_track(frames: &[f64], track: &[BoxCoords], degree: usize) -> Result<(Vec<BoxCoords>, f64)> {
    let mut fitted = vec![[0.0; 4]; track.len()];
    let mut loss = 0.0;
    for c in 0..4 {
        let vals: Vec<f64> = track.iter().map(|b| b.to_array()[c]).collect();
        let fit = polyfit(frames, &vals, degree)?;
        for ((f, v), z) in fitted.iter_mut().zip(&fit).zip(&vals) {
            f[c] = *v;
            loss += (z - v) * (z - v);
        }
    }
    Ok((fitted.into_iter().map(BoxCoords::from_array).collect(), loss))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectConfig {
    pub lambda_coord: f64,
    pub lambda_fit: f64,
    pub lambda_conf: f64,
    pub lambda_iou: f64,
    pub alpha: f64,
    pub softplus_beta: f64,
    pub degree: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 1.0,
            lambda_fit: 0.5,
            lambda_conf: 1.0,
            lambda_iou: 1.0,
            alpha: 2.0,
            softplus_beta: 1.0,
            degree: 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub coord: f64,
    pub fit: f64,
    pub conf: f64,
    pub iou: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.coord + self.fit + self.conf + self.iou
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Objective {
    pub loss: f64,
    pub terms: LossTerms,
    /// Per frame, gradient of the loss w.r.t. the `HEAD_OUTPUTS` raw values.
    pub grad: Vec<Vec<f64>>,
    /// Per frame, the anchor that owns the target (None without an object).
    pub owners: Vec<Option<usize>>,
    pub mean_iou: f64,
}

/// Anchor whose shape best overlaps the box when both share a center.
pub fn best_anchor(anchors: &[Anchor], gt: &BoxCoords) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, a) in anchors.iter().enumerate() {
        let v = iou(&BoxCoords::new(0.0, 0.0, a.w, a.h), &BoxCoords::new(0.0, 0.0, gt.w, gt.h));
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn raw_at(frame: &[f64], a: usize) -> [f64; PER_ANCHOR] {
    std::array::from_fn(|i| frame[a * PER_ANCHOR + i])
}

/// Snippet objective averaged over frames:
/// `λ_coord·Σ(z−z̃)² + λ_fit·Σ(z−ẑ)² + λ_conf·(conf terms) − λ_IOU·ln σ(α·IOU(z, z̃))`.
///
/// `raw` holds `HEAD_OUTPUTS` values per frame; `truth` is the target box per
/// frame, `None` where no object is present.
pub fn objective(
    raw: &[Vec<f64>],
    truth: &[Option<BoxCoords>],
    anchors: &[Anchor],
    cfg: &DetectConfig,
) -> Result<Objective> {
    check_dim(truth.len(), raw.len())?;
    check_beta(cfg.softplus_beta)?;
    check_dim(NUM_ANCHORS, anchors.len())?;
    let n = raw.len();
    if n == 0 {
        return Err(ScnnError::EmptyInput("objective needs at least one frame"));
    }
    let scale = 1.0 / n as f64;
    let mut terms = LossTerms::default();
    let mut grad = vec![vec![0.0; HEAD_OUTPUTS]; n];
    let mut owners = vec![None; n];

    // Decoded owner boxes and per-frame coordinate gradients.
    let mut present = Vec::new();
    let mut boxes = Vec::new();
    let mut dz = Vec::new();
    let mut iou_sum = 0.0;
    for (t, (frame, gt)) in raw.iter().zip(truth).enumerate() {
        check_dim(HEAD_OUTPUTS, frame.len())?;
        let owner = gt.map(|g| best_anchor(anchors, &g));
        owners[t] = owner;
        for a in 0..anchors.len() {
            let r = raw_at(frame, a);
            let c = sigmoid(r[4]);
            let target = if owner == Some(a) { 1.0 } else { 0.0 };
            terms.conf += cfg.lambda_conf * (c - target).powi(2);
            grad[t][a * PER_ANCHOR + 4] +=
                scale * cfg.lambda_conf * 2.0 * (c - target) * c * (1.0 - c);
        }
        if let (Some(a), Some(g)) = (owner, gt) {
            let pred = decode_box(&raw_at(frame, a), anchors[a], cfg.softplus_beta)?;
            let z = pred.bbox.to_array();
            let zt = g.to_array();
            let mut d = [0.0; 4];
            for c in 0..4 {
                terms.coord += cfg.lambda_coord * (z[c] - zt[c]).powi(2);
                d[c] += cfg.lambda_coord * 2.0 * (z[c] - zt[c]);
            }
            let (x, gx) = iou_with_grad(&pred.bbox, g);
            iou_sum += x;
            let s = sigmoid(cfg.alpha * x);
            terms.iou -= cfg.lambda_iou * s.ln();
            // d/dX of -ln σ(αX) = -α(1 - σ(αX))
            let dl_dx = -cfg.lambda_iou * cfg.alpha * (1.0 - s);
            for c in 0..4 {
                d[c] += dl_dx * gx[c];
            }
            present.push(t as f64);
            boxes.push(pred.bbox);
            dz.push((t, a, d));
        }
    }
    if boxes.len() > cfg.degree {
        let (fitted, _) = polyfit_track(&present, &boxes, cfg.degree)?;
        for ((b, f), (_, _, d)) in boxes.iter().zip(&fitted).zip(dz.iter_mut()) {
            let (z, zh) = (b.to_array(), f.to_array());
            for c in 0..4 {
                let r = z[c] - zh[c];
                terms.fit += cfg.lambda_fit * r * r;
                // the hat matrix is a symmetric projection, so ∇‖(I−P)z‖² = 2(I−P)z
                d[c] += cfg.lambda_fit * 2.0 * r;
            }
        }
    }
    for (t, a, d) in dz {
        let r = raw_at(&raw[t], a);
        let dd = decode_derivs(&r, anchors[a], cfg.softplus_beta);
        for c in 0..4 {
            grad[t][a * PER_ANCHOR + c] += scale * d[c] * dd[c];
        }
    }
    terms.coord *= scale;
    terms.fit *= scale;
    terms.conf *= scale;
    terms.iou *= scale;
    let matched = present.len().max(1) as f64;
    Ok(Objective {
        loss: terms.total(),
        terms,
        grad,
        owners,
        mean_iou: iou_sum / matched,
    })
}

/// Highest-confidence anchor prediction of one frame.
pub fn best_prediction(frame: &[f64], anchors: &[Anchor], beta: f64) -> Result<BoxPrediction> {
    check_dim(HEAD_OUTPUTS, frame.len())?;
    let mut best: Option<BoxPrediction> = None;
    for (a, &anchor) in anchors.iter().enumerate() {
        let p = decode_box(&raw_at(frame, a), anchor, beta)?;
        if best.is_none_or(|b| p.confidence > b.confidence) {
            best = Some(p);
        }
    }
    best.ok_or(ScnnError::EmptyInput("no anchors"))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub image: usize,
    pub class: u32,
    pub confidence: f64,
    pub bbox: BoxCoords,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub image: usize,
    pub class: u32,
    pub bbox: BoxCoords,
}

/// Mean over ground-truth classes of all-point interpolated average
/// precision, counting a detection as correct when IOU > 0.5 with an
/// unmatched ground truth of the same image and class.
pub fn map_at_50(detections: &[Detection], truth: &[GroundTruth]) -> Result<f64> {
    if truth.is_empty() {
        return Err(ScnnError::EmptyInput("mAP needs ground truth"));
    }
    let mut classes: Vec<u32> = truth.iter().map(|g| g.class).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut ap_sum = 0.0;
    for &class in &classes {
        let gts: Vec<&GroundTruth> = truth.iter().filter(|g| g.class == class).collect();
        let mut dets: Vec<&Detection> = detections.iter().filter(|d| d.class == class).collect();
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut used = vec![false; gts.len()];
        let mut tp = Vec::with_capacity(dets.len());
        for d in &dets {
            let mut best = (None, 0.5);
            for (j, g) in gts.iter().enumerate() {
                if g.image != d.image || used[j] {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if v > best.1 {
                    best = (Some(j), v);
                }
            }
            match best.0 {
                Some(j) => {
                    used[j] = true;
                    tp.push(true);
                }
                None => tp.push(false),
            }
        }
        let mut precision = Vec::with_capacity(tp.len());
        let mut recall = Vec::with_capacity(tp.len());
        let (mut hits, mut seen) = (0.0, 0.0);
        for &hit in &tp {
            seen += 1.0;
            if hit {
                hits += 1.0;
            }
            precision.push(hits / seen);
            recall.push(hits / gts.len() as f64);
        }
        // precision envelope, then area under the step curve
        for i in (0..precision.len().saturating_sub(1)).rev() {
            precision[i] = precision[i].max(precision[i + 1]);
        }
        let mut ap = 0.0;
        let mut prev_r = 0.0;
        for (p, r) in precision.iter().zip(&recall) {
            ap += (r - prev_r) * p;
            prev_r = *r;
        }
        ap_sum += ap;
    }
    Ok(ap_sum / classes.len() as f64)
}
