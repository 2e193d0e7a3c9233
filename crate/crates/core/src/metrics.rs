//! Trajectory, segmentation and track-quality metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{umeyama, PoseSE3, Sim3};
use crate::io::{Track, TrackSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: predicted {pred}, ground truth {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("need at least 2 poses, got {0}")]
    TooFewPoses(usize),
    #[error("delta {delta} leaves no pairs in {len} frames")]
    DeltaTooLarge { delta: usize, len: usize },
    #[error("track ids or frame ranges differ: {0}")]
    IdMismatch(String),
    #[error("track {id}: probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { id: u64, value: f64 },
    #[error("alignment failed: {0}")]
    Alignment(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    #[default]
    Sim3,
    Se3,
    None,
}

impl fmt::Display for Alignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Alignment::Sim3 => "sim3",
            Alignment::Se3 => "se3",
            Alignment::None => "none",
        })
    }
}

impl FromStr for Alignment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sim3" => Ok(Alignment::Sim3),
            "se3" => Ok(Alignment::Se3),
            "none" => Ok(Alignment::None),
            other => Err(format!("unknown alignment '{other}' (expected sim3, se3 or none)")),
        }
    }
}

fn check_lengths(pred: &[PoseSE3], gt: &[PoseSE3]) -> Result<(), MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    if pred.len() < 2 {
        return Err(MetricsError::TooFewPoses(pred.len()));
    }
    Ok(())
}

/// Transform taking predicted camera centers onto the ground truth.
pub fn align_trajectories(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment) -> Result<Sim3, MetricsError> {
    check_lengths(pred, gt)?;
    let src: Vec<Vector3<f64>> = pred.iter().map(PoseSE3::center).collect();
    let dst: Vec<Vector3<f64>> = gt.iter().map(PoseSE3::center).collect();
    match mode {
        Alignment::None => Ok(Sim3::identity()),
        Alignment::Se3 => umeyama(&src, &dst, false).map_err(|e| MetricsError::Alignment(e.to_string())),
        Alignment::Sim3 => umeyama(&src, &dst, true).map_err(|e| MetricsError::Alignment(e.to_string())),
    }
}

/// Per-frame camera-center errors after alignment.
pub fn ate_errors(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment) -> Result<Vec<f64>, MetricsError> {
    let transform = align_trajectories(pred, gt, mode)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| (transform.apply(&p.center()) - g.center()).norm()).collect())
}

/// Absolute trajectory error (RMSE of aligned camera centers).
pub fn ate(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment) -> Result<f64, MetricsError> {
    Ok(rms(&ate_errors(pred, gt, mode)?))
}

fn rms(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    (values.iter().map(|v| v * v).sum::<f64>() / values.len() as f64).sqrt()
}

/// Translation norm and rotation angle (degrees) of each relative-pose error.
pub fn rpe_errors(pred: &[PoseSE3], gt: &[PoseSE3], delta: usize) -> Result<Vec<(f64, f64)>, MetricsError> {
    check_lengths(pred, gt)?;
    if delta == 0 || delta >= pred.len() {
        return Err(MetricsError::DeltaTooLarge { delta, len: pred.len() });
    }
    Ok((0..pred.len() - delta)
        .map(|i| {
            let gt_rel = gt[i].inverse().compose(&gt[i + delta]);
            let pred_rel = pred[i].inverse().compose(&pred[i + delta]);
            let e = gt_rel.inverse().compose(&pred_rel);
            (e.translation().norm(), e.angle().to_degrees())
        })
        .collect())
}

/// `(rpe_trans, rpe_rot)`; rotation in degrees.
pub fn rpe(pred: &[PoseSE3], gt: &[PoseSE3], delta: usize) -> Result<(f64, f64), MetricsError> {
    let errors = rpe_errors(pred, gt, delta)?;
    let trans: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let rot: Vec<f64> = errors.iter().map(|e| e.1).collect();
    Ok((rms(&trans), rms(&rot)))
}

/// RPE of the prediction after mapping it through the ATE alignment, so
/// translation errors are in ground-truth units.
pub fn aligned_rpe_errors(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment, delta: usize) -> Result<Vec<(f64, f64)>, MetricsError> {
    let transform = align_trajectories(pred, gt, mode)?;
    let aligned: Vec<PoseSE3> = pred.iter().map(|p| transform.apply_pose(p)).collect();
    rpe_errors(&aligned, gt, delta)
}

pub fn aligned_rpe(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment, delta: usize) -> Result<(f64, f64), MetricsError> {
    let errors = aligned_rpe_errors(pred, gt, mode, delta)?;
    let trans: Vec<f64> = errors.iter().map(|e| e.0).collect();
    let rot: Vec<f64> = errors.iter().map(|e| e.1).collect();
    Ok((rms(&trans), rms(&rot)))
}

/// Confusion counts with dynamic as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

impl SegMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if tp + fp + fn_ == 0 {
            1.0
        } else if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self { tp, fp, fn_, tn, precision, recall, f1, iou: ratio(tp, tp + fp + fn_) }
    }
}

pub fn seg_metrics(pred: &[bool], gt: &[bool]) -> Result<SegMetrics, MetricsError> {
    if pred.len() != gt.len() {
        return Err(MetricsError::LengthMismatch { pred: pred.len(), gt: gt.len() });
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(SegMetrics::from_counts(tp, fp, fn_, tn))
}

/// Per-track labels of two track sets matched by id.
pub fn seg_metrics_tracks(pred: &TrackSet, gt: &TrackSet) -> Result<SegMetrics, MetricsError> {
    if pred.ids() != gt.ids() {
        return Err(MetricsError::IdMismatch("predicted and ground-truth track ids differ".into()));
    }
    let p: Vec<bool> = pred.iter().map(Track::is_dynamic).collect();
    let g: Vec<bool> = gt.iter().map(Track::is_dynamic).collect();
    seg_metrics(&p, &g)
}

/// A predicted track with per-frame visibility and dynamic probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedTrack {
    pub id: u64,
    pub start: usize,
    pub points: Vec<Vector2<f64>>,
    pub visibility: Vec<f64>,
    pub dynamic: Vec<f64>,
}

impl PredictedTrack {
    /// Hard labels become probabilities 0 or 1; a track `score` is used as the
    /// dynamic probability of every frame when present.
    pub fn from_track(t: &Track) -> Self {
        let dynamic = match (t.score, &t.dynamic) {
            (Some(s), _) => vec![s; t.len()],
            (None, Some(d)) => d.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            (None, None) => vec![0.0; t.len()],
        };
        Self {
            id: t.id,
            start: t.start,
            points: t.points.clone(),
            visibility: t.visible.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            dynamic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub traj: f64,
    pub vis: f64,
    #[serde(rename = "dyn")]
    pub dyn_: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { traj: 1.0, vis: 1.0, dyn_: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackLosses {
    pub l_traj: f64,
    pub l_vis: f64,
    pub l_dyn: f64,
    pub l_total: f64,
    /// Number of (track, frame) terms in each sum.
    pub terms: usize,
    pub mean_l_traj: f64,
    pub mean_l_vis: f64,
    pub mean_l_dyn: f64,
}

pub const PROBABILITY_EPS: f64 = 1e-7;

fn bce(p: f64, label: bool, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Summed L1 trajectory loss and binary cross-entropies against ground truth.
pub fn track_losses(
    pred: &[PredictedTrack],
    gt: &TrackSet,
    weights: &LossWeights,
    eps: f64,
) -> Result<TrackLosses, MetricsError> {
    let by_id: BTreeMap<u64, &PredictedTrack> = pred.iter().map(|p| (p.id, p)).collect();
    if by_id.len() != pred.len() || by_id.keys().copied().ne(gt.iter().map(|t| t.id)) {
        return Err(MetricsError::IdMismatch("predicted and ground-truth track ids differ".into()));
    }
    let (mut l_traj, mut l_vis, mut l_dyn, mut terms) = (0.0, 0.0, 0.0, 0usize);
    for g in gt {
        let p = by_id[&g.id];
        if p.start != g.start || p.points.len() != g.len() || p.visibility.len() != g.len() || p.dynamic.len() != g.len() {
            return Err(MetricsError::IdMismatch(format!("track {} covers different frames", g.id)));
        }
        for &v in p.visibility.iter().chain(&p.dynamic) {
            if !(0.0..=1.0).contains(&v) {
                return Err(MetricsError::ProbabilityOutOfRange { id: g.id, value: v });
            }
        }
        for i in 0..g.len() {
            let d = p.points[i] - g.points[i];
            l_traj += d.x.abs() + d.y.abs();
            l_vis += bce(p.visibility[i], g.visible[i], eps);
            let truth = g.dynamic.as_ref().is_some_and(|d| d[i]);
            l_dyn += bce(p.dynamic[i], truth, eps);
        }
        terms += g.len();
    }
    let mean = |v: f64| if terms == 0 { 0.0 } else { v / terms as f64 };
    Ok(TrackLosses {
        l_traj,
        l_vis,
        l_dyn,
        l_total: weights.traj * l_traj + weights.vis * l_vis + weights.dyn_ * l_dyn,
        terms,
        mean_l_traj: mean(l_traj),
        mean_l_vis: mean(l_vis),
        mean_l_dyn: mean(l_dyn),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub alignment: Alignment,
    pub frames: usize,
    pub ate_rmse: f64,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<SegMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<TrackLosses>,
}

impl MetricsReport {
    pub fn trajectory(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment, rpe_delta: usize) -> Result<Self, MetricsError> {
        let (rpe_trans, rpe_rot) = aligned_rpe(pred, gt, mode, rpe_delta)?;
        Ok(Self { alignment: mode, frames: pred.len(), ate_rmse: ate(pred, gt, mode)?, rpe_trans, rpe_rot, seg: None, losses: None })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Per-frame error table: `frame,ate,rpe_trans,rpe_rot` with aligned RPE; the
/// RPE columns are empty for frames without a successor.
pub fn per_frame_csv(pred: &[PoseSE3], gt: &[PoseSE3], mode: Alignment) -> Result<String, MetricsError> {
    let ate = ate_errors(pred, gt, mode)?;
    let rpe = aligned_rpe_errors(pred, gt, mode, 1)?;
    let mut out = String::from("frame,ate,rpe_trans,rpe_rot\n");
    for (i, a) in ate.iter().enumerate() {
        match rpe.get(i) {
            Some((t, r)) => out += &format!("{i},{a},{t},{r}\n"),
            None => out += &format!("{i},{a},,\n"),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::UnitQuaternion;

    fn line(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| {
                let a = i as f64 * 0.1;
                PoseSE3::new(UnitQuaternion::from_euler_angles(0.0, a, 0.02 * a), Vector3::new(i as f64, (7.0 * a).sin(), 0.2 * a * a))
            })
            .collect()
    }

    #[test]
    fn single_offset_without_alignment() {
        let gt = line(10);
        let mut pred = gt.clone();
        pred[4] = PoseSE3::new(*pred[4].rotation(), pred[4].translation() + Vector3::new(0.3, 0.0, 0.0));
        let v = ate(&pred, &gt, Alignment::None).unwrap();
        assert!((v - (0.09f64 / 10.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn identical_trajectories_have_zero_error() {
        let gt = line(6);
        for mode in [Alignment::Sim3, Alignment::Se3, Alignment::None] {
            let v = ate(&gt, &gt, mode).unwrap();
            assert!(v < 1e-12, "{mode}: {v}");
        }
        let (t, r) = rpe(&gt, &gt, 1).unwrap();
        assert!(t < 1e-12 && r < 1e-12);
    }

    #[test]
    fn sim3_alignment_absorbs_similarity() {
        let gt = line(10);
        let t = Sim3::new(2.5, UnitQuaternion::from_euler_angles(0.3, -1.1, 2.0), Vector3::new(4.0, -2.0, 7.0));
        let pred: Vec<PoseSE3> = gt.iter().map(|p| t.apply_pose(p)).collect();
        assert!(ate(&pred, &gt, Alignment::Sim3).unwrap() < 1e-9);
        assert!(ate(&pred, &gt, Alignment::Se3).unwrap() > 0.1);
    }

    #[test]
    fn single_rotation_error_over_nine_pairs() {
        let gt = line(10);
        let mut pred = gt.clone();
        let kick = UnitQuaternion::from_euler_angles(0.0, 0.0, 1f64.to_radians());
        for p in pred.iter_mut().skip(5) {
            *p = PoseSE3::new(kick * p.rotation(), *p.translation());
        }
        let (_, rot) = rpe(&pred, &gt, 1).unwrap();
        let errors = rpe_errors(&pred, &gt, 1).unwrap();
        assert!((errors[4].1 - 1.0).abs() < 1e-9);
        for (i, e) in errors.iter().enumerate().filter(|(i, _)| *i != 4) {
            assert!(e.1 < 1e-9, "pair {i}: {}", e.1);
        }
        assert!((rot - (1.0f64 / 9.0).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn aligned_rpe_ignores_a_global_similarity() {
        let gt = line(12);
        let t = Sim3::new(3.5, UnitQuaternion::from_euler_angles(0.4, -0.2, 1.1), Vector3::new(2.0, -1.0, 0.5));
        let pred: Vec<PoseSE3> = gt.iter().map(|p| t.apply_pose(p)).collect();
        let (trans, rot) = aligned_rpe(&pred, &gt, Alignment::Sim3, 2).unwrap();
        assert!(trans < 1e-9 && rot < 1e-6, "{trans} {rot}");
        assert!(rpe(&pred, &gt, 1).unwrap().0 > 0.1);
    }

    #[test]
    fn rpe_errors_reported() {
        let gt = line(3);
        assert_eq!(rpe(&gt, &gt, 3), Err(MetricsError::DeltaTooLarge { delta: 3, len: 3 }));
        assert_eq!(rpe(&gt, &gt[..2], 1), Err(MetricsError::LengthMismatch { pred: 3, gt: 2 }));
    }

    #[test]
    fn confusion_examples() {
        let m = SegMetrics::from_counts(3, 1, 1, 5);
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.75, 0.75, 0.75, 0.6));
        let empty = seg_metrics(&[false; 4], &[false; 4]).unwrap();
        assert_eq!((empty.precision, empty.recall, empty.f1, empty.iou, empty.tn), (1.0, 1.0, 1.0, 1.0, 4));
        let perfect = seg_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((perfect.precision, perfect.recall, perfect.f1, perfect.iou), (1.0, 1.0, 1.0, 1.0));
        assert!(seg_metrics(&[true], &[]).is_err());
    }

    fn gt_track(id: u64, len: usize) -> Track {
        Track {
            id,
            start: 0,
            points: (0..len).map(|i| Vector2::new(i as f64, 2.0 * i as f64)).collect(),
            visible: vec![true; len],
            depth: None,
            dynamic: Some(vec![false; len]),
            score: None,
        }
    }

    #[test]
    fn loss_examples() {
        let gt = TrackSet::new(vec![gt_track(1, 3), gt_track(2, 3)], 3).unwrap();
        let mut pred: Vec<PredictedTrack> = gt.iter().map(PredictedTrack::from_track).collect();
        let exact = track_losses(&pred, &gt, &LossWeights::default(), PROBABILITY_EPS).unwrap();
        assert_eq!(exact.l_traj, 0.0);
        let floor = -(1.0 - PROBABILITY_EPS).ln();
        assert!((exact.l_vis - 6.0 * floor).abs() < 1e-9);
        assert!((exact.l_dyn - 6.0 * floor).abs() < 1e-9);

        for p in &mut pred {
            for x in &mut p.points {
                x.x += 1.0;
            }
            p.visibility = vec![0.5; 3];
            p.dynamic = vec![0.5; 3];
        }
        let l = track_losses(&pred, &gt, &LossWeights::default(), PROBABILITY_EPS).unwrap();
        assert_eq!(l.l_traj, 6.0);
        assert!((l.l_vis - 6.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l.l_dyn - 6.0 * std::f64::consts::LN_2).abs() < 1e-9);
        assert!((l.l_total - (l.l_traj + l.l_vis + l.l_dyn)).abs() < 1e-12);
        assert_eq!(l.mean_l_traj, 1.0);
    }

    #[test]
    fn loss_errors() {
        let gt = TrackSet::new(vec![gt_track(1, 3)], 3).unwrap();
        let mut pred = vec![PredictedTrack::from_track(gt.get(1).unwrap())];
        pred[0].dynamic[1] = 1.5;
        assert_eq!(
            track_losses(&pred, &gt, &LossWeights::default(), PROBABILITY_EPS),
            Err(MetricsError::ProbabilityOutOfRange { id: 1, value: 1.5 })
        );
        pred[0].id = 9;
        assert!(matches!(track_losses(&pred, &gt, &LossWeights::default(), PROBABILITY_EPS), Err(MetricsError::IdMismatch(_))));
    }

    #[test]
    fn alignment_parses() {
        assert_eq!("SE3".parse::<Alignment>(), Ok(Alignment::Se3));
        assert!("affine".parse::<Alignment>().is_err());
        assert_eq!(serde_json::to_string(&Alignment::Sim3).unwrap(), "\"sim3\"");
    }

    #[test]
    fn csv_has_one_row_per_frame() {
        let gt = line(4);
        let csv = per_frame_csv(&gt, &gt, Alignment::None).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.ends_with("3,0,,\n"));
    }
}
