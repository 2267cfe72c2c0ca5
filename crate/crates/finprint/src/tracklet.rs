//! Tracklet clustering: group per-frame bounding boxes into identity
//! clusters with DBSCAN over a combined overlap + frame-gap distance.
//!
//! Two boxes in the *same* frame are different individuals by construction,
//! so their distance is pinned to `max_distance`. Across frames the distance
//! blends how much the boxes overlap with how far apart in time they are:
//!
//! ```text
//! d(b1, b2) = max_distance                                if frame gap == 0
//!           = ((1 - iou(b1, b2)) + min(1, lambda * gap)) / 2   otherwise
//! ```
//!
//! which lies in `[0, 1]`, so a DBSCAN radius below `max_distance` can never
//! bridge a same-frame pair directly. With the default `lambda = 1/30`
//! (full temporal penalty one second into a 30 FPS stream), overlapping
//! boxes in nearby frames score close to zero and get clustered into a
//! tracklet, while a track that vanishes and reappears after a long gap
//! scores high and starts a new cluster. That split is expected and left to
//! manual relabeling ([`apply_relabels`]).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::types::FrameBox;

/// Cluster label for points that no cluster claims.
pub const NOISE: i64 = -1;

/// Parameters for the clustering distance and DBSCAN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackletParams {
    /// DBSCAN neighborhood radius.
    pub eps: f64,
    /// Minimum neighborhood size (including the point itself) for a core point.
    pub min_pts: usize,
    /// Temporal weight per frame of gap; the temporal term saturates at 1.
    pub lambda: f64,
    /// Finite stand-in for the same-frame "infinite" distance.
    pub max_distance: f64,
}

impl Default for TrackletParams {
    fn default() -> Self {
        TrackletParams {
            eps: 0.4,
            min_pts: 3,
            lambda: 1.0 / 30.0,
            max_distance: 1e9,
        }
    }
}

impl TrackletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        if self.min_pts < 1 {
            return Err(Error::Config("min_pts must be at least 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.eps >= self.max_distance {
            return Err(Error::Config("eps must be below max_distance".into()));
        }
        Ok(())
    }
}

/// Per-box cluster labels. Labels are dense integers starting at 0 plus the
/// [`NOISE`] label; every input box id appears exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    entries: Vec<(u64, i64)>,
}

impl ClusterAssignment {
    /// Build from `(box_id, cluster)` pairs, checking uniqueness and density.
    pub fn new(entries: Vec<(u64, i64)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (id, _) in &entries {
            if !seen.insert(*id) {
                return Err(Error::Invalid(format!("duplicate box_id {id} in assignment")));
            }
        }
        let mut labels: Vec<i64> = entries
            .iter()
            .map(|(_, c)| *c)
            .filter(|&c| c != NOISE)
            .collect();
        labels.sort_unstable();
        labels.dedup();
        for (i, &l) in labels.iter().enumerate() {
            if l != i as i64 {
                return Err(Error::Invalid(format!(
                    "cluster labels must be dense integers from 0; missing {i}, saw {l}"
                )));
            }
        }
        Ok(ClusterAssignment { entries })
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, i64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn cluster_of(&self, box_id: u64) -> Option<i64> {
        self.entries.iter().find(|(id, _)| *id == box_id).map(|&(_, c)| c)
    }

    /// Number of clusters (exclusive of noise).
    pub fn n_clusters(&self) -> usize {
        self.entries
            .iter()
            .filter(|(_, c)| *c != NOISE)
            .map(|(_, c)| *c)
            .max()
            .map_or(0, |m| (m + 1) as usize)
    }
}

/// Per-cluster statistics reported alongside an assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterSummary {
    pub cluster: i64,
    pub boxes: usize,
    pub frame_min: u32,
    pub frame_max: u32,
}

/// Intersection-over-union of two boxes; symmetric, in `[0, 1]`.
pub fn iou(a: &FrameBox, b: &FrameBox) -> f64 {
    let ix = overlap(a.x, a.w, b.x, b.w);
    let iy = overlap(a.y, a.h, b.y, b.h);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn overlap(a0: f64, alen: f64, b0: f64, blen: f64) -> f64 {
    let lo = a0.max(b0);
    let hi = (a0 + alen).min(b0 + blen);
    (hi - lo).max(0.0)
}

/// The clustering distance described in the module docs.
///
/// Returns `p.max_distance` for same-frame boxes; otherwise a value in
/// `[0, 1]`. Symmetric in its box arguments.
pub fn box_distance(a: &FrameBox, b: &FrameBox, p: &TrackletParams) -> f64 {
    let gap = (a.frame as i64 - b.frame as i64).abs() as f64;
    if gap == 0.0 {
        return p.max_distance;
    }
    let temporal = (p.lambda * gap).min(1.0);
    ((1.0 - iou(a, b)) + temporal) / 2.0
}

/// DBSCAN over `ids` with a caller-supplied distance oracle.
///
/// Standard semantics: a point is core when at least `min_pts` points
/// (itself included) lie within `eps`; clusters are maximal
/// density-connected sets; non-core points not reachable from any core are
/// noise. Expansion visits points in ascending id order, which pins down
/// border-point assignment and makes the output deterministic: clusters are
/// numbered by their smallest core id, and a border point reachable from
/// several clusters joins the earliest-numbered one.
pub fn dbscan<D>(ids: &[u64], dist: D, p: &TrackletParams) -> Result<ClusterAssignment>
where
    D: Fn(u64, u64) -> f64,
{
    p.validate()?;
    let mut order: Vec<u64> = ids.to_vec();
    order.sort_unstable();
    order.dedup();
    if order.len() != ids.len() {
        return Err(Error::Invalid("duplicate box_id passed to dbscan".into()));
    }
    let n = order.len();

    // Neighborhoods on the canonical (ascending id) order.
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| j == i || dist(order[i], order[j]) <= p.eps)
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= p.min_pts).collect();

    let mut label = vec![NOISE; n];
    let mut claimed = vec![false; n];
    let mut next_cluster: i64 = 0;

    for seed in 0..n {
        if claimed[seed] || !core[seed] {
            continue;
        }
        let cluster = next_cluster;
        next_cluster += 1;
        label[seed] = cluster;
        claimed[seed] = true;
        let mut queue = vec![seed];
        while let Some(i) = queue.pop() {
            // Only core points extend the cluster.
            for &j in &neighbors[i] {
                if claimed[j] {
                    continue;
                }
                claimed[j] = true;
                label[j] = cluster;
                if core[j] {
                    queue.push(j);
                }
            }
        }
    }

    let entries = order.into_iter().zip(label).collect();
    ClusterAssignment::new(entries)
}

/// Cluster boxes by composing [`box_distance`] with [`dbscan`].
///
/// Returns the assignment plus per-cluster frame spans.
pub fn cluster_boxes(
    boxes: &[FrameBox],
    p: &TrackletParams,
) -> Result<(ClusterAssignment, Vec<ClusterSummary>)> {
    if boxes.is_empty() {
        return Err(Error::Invalid("no boxes to cluster".into()));
    }
    let mut sorted: Vec<FrameBox> = boxes.to_vec();
    sorted.sort_by_key(|b| b.box_id);
    for win in sorted.windows(2) {
        if win[0].box_id == win[1].box_id {
            return Err(Error::Invalid(format!("duplicate box_id {}", win[0].box_id)));
        }
    }
    let idx_of: HashMap<u64, usize> = sorted
        .iter()
        .enumerate()
        .map(|(i, b)| (b.box_id, i))
        .collect();

    // Precompute the symmetric distance matrix once.
    let n = sorted.len();
    let mut dmat = vec![0.0f64; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = box_distance(&sorted[i], &sorted[j], p);
            dmat[i * n + j] = d;
            dmat[j * n + i] = d;
        }
    }
    let ids: Vec<u64> = sorted.iter().map(|b| b.box_id).collect();
    let assignment = dbscan(&ids, |a, b| dmat[idx_of[&a] * n + idx_of[&b]], p)?;

    let mut spans: HashMap<i64, (usize, u32, u32)> = HashMap::new();
    for (box_id, cluster) in assignment.iter() {
        let frame = sorted[idx_of[&box_id]].frame;
        let e = spans.entry(cluster).or_insert((0, frame, frame));
        e.0 += 1;
        e.1 = e.1.min(frame);
        e.2 = e.2.max(frame);
    }
    let mut summaries: Vec<ClusterSummary> = spans
        .into_iter()
        .map(|(cluster, (boxes, frame_min, frame_max))| ClusterSummary {
            cluster,
            boxes,
            frame_min,
            frame_max,
        })
        .collect();
    summaries.sort_by_key(|s| s.cluster);
    Ok((assignment, summaries))
}

/// Apply manual label fixes `(cluster -> identity)` and re-densify.
///
/// Clusters mapped to the same identity merge. Noise stays noise unless a
/// fix explicitly maps the [`NOISE`] label. Final labels are dense `0..k`
/// in order of first appearance (ascending box id). Unknown fix targets are
/// an error.
pub fn apply_relabels(
    a: &ClusterAssignment,
    fixes: &[(i64, i64)],
) -> Result<ClusterAssignment> {
    let present: std::collections::HashSet<i64> = a.iter().map(|(_, c)| c).collect();
    let mut map: HashMap<i64, i64> = HashMap::new();
    for &(from, to) in fixes {
        if !present.contains(&from) {
            return Err(Error::Invalid(format!("relabel of unknown cluster {from}")));
        }
        map.insert(from, to);
    }

    // First pass: merged (but possibly sparse) labels.
    let merged: Vec<(u64, i64)> = a
        .iter()
        .map(|(id, c)| {
            let c2 = match map.get(&c) {
                Some(&to) => to,
                None if c == NOISE => NOISE,
                None => c,
            };
            (id, c2)
        })
        .collect();

    // Second pass: densify in order of first appearance.
    let mut dense: HashMap<i64, i64> = HashMap::new();
    let mut next = 0i64;
    let entries = merged
        .into_iter()
        .map(|(id, c)| {
            if c == NOISE {
                (id, NOISE)
            } else {
                let d = *dense.entry(c).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                });
                (id, d)
            }
        })
        .collect();
    ClusterAssignment::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bx(box_id: u64, frame: u32, x: f64, y: f64, w: f64, h: f64) -> FrameBox {
        FrameBox::new(box_id, frame, x, y, w, h).unwrap()
    }

    #[test]
    fn iou_identical_is_one() {
        let a = bx(1, 0, 3.0, 4.0, 10.0, 12.0);
        assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn iou_disjoint_is_zero() {
        let a = bx(1, 0, 0.0, 0.0, 2.0, 2.0);
        let b = bx(2, 0, 10.0, 10.0, 2.0, 2.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_unit_offset_overlap() {
        // intersection 1, union 4 + 4 - 1 = 7
        let a = bx(1, 0, 0.0, 0.0, 2.0, 2.0);
        let b = bx(2, 0, 1.0, 1.0, 2.0, 2.0);
        assert_relative_eq!(iou(&a, &b), 1.0 / 7.0, max_relative = 1e-12);
        assert_relative_eq!(iou(&b, &a), 1.0 / 7.0, max_relative = 1e-12);
    }

    #[test]
    fn same_frame_distance_is_max() {
        let p = TrackletParams::default();
        let a = bx(1, 5, 0.0, 0.0, 2.0, 2.0);
        let b = bx(2, 5, 0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_distance(&a, &b, &p), p.max_distance);
    }

    #[test]
    fn perfect_overlap_adjacent_frames_zero_lambda() {
        let p = TrackletParams {
            lambda: 0.0,
            ..TrackletParams::default()
        };
        let a = bx(1, 5, 0.0, 0.0, 2.0, 2.0);
        let b = bx(2, 6, 0.0, 0.0, 2.0, 2.0);
        assert_eq!(box_distance(&a, &b, &p), 0.0);
    }

    #[test]
    fn twelve_frame_gap_example() {
        // iou 1/7, gap 12, lambda 1/30: ((6/7) + (12/30)) / 2
        let p = TrackletParams {
            lambda: 1.0 / 30.0,
            ..TrackletParams::default()
        };
        let a = bx(1, 61, 0.0, 0.0, 2.0, 2.0);
        let b = bx(2, 73, 1.0, 1.0, 2.0, 2.0);
        let expect = (6.0 / 7.0 + 12.0 / 30.0) / 2.0;
        assert_relative_eq!(box_distance(&a, &b, &p), expect, max_relative = 1e-12);
        assert_relative_eq!(expect, 0.628_571_428_571, max_relative = 1e-9);
    }

    #[test]
    fn distance_symmetry_and_range() {
        let p = TrackletParams::default();
        let a = bx(1, 3, 0.0, 0.0, 4.0, 4.0);
        let b = bx(2, 9, 2.0, 1.0, 4.0, 3.0);
        let d1 = box_distance(&a, &b, &p);
        let d2 = box_distance(&b, &a, &p);
        assert_eq!(d1, d2);
        assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn dbscan_single_dense_blob() {
        let p = TrackletParams {
            min_pts: 1,
            ..TrackletParams::default()
        };
        let ids = [4u64, 2, 9];
        let a = dbscan(&ids, |_, _| 0.0, &p).unwrap();
        for (_, c) in a.iter() {
            assert_eq!(c, 0);
        }
    }

    #[test]
    fn dbscan_lone_point_is_noise_when_min_pts_two() {
        let p = TrackletParams {
            min_pts: 2,
            ..TrackletParams::default()
        };
        let a = dbscan(&[7], |_, _| 0.0, &p).unwrap();
        assert_eq!(a.cluster_of(7), Some(NOISE));
    }

    #[test]
    fn consecutive_track_clusters_together() {
        // One box per frame, same geometry, 5 consecutive frames:
        // max pairwise distance (0 + 4/30)/2 < 0.3.
        let p = TrackletParams {
            eps: 0.3,
            min_pts: 2,
            lambda: 1.0 / 30.0,
            max_distance: 1e9,
        };
        let boxes: Vec<FrameBox> = (0..5).map(|f| bx(f as u64, f, 10.0, 10.0, 5.0, 5.0)).collect();
        let (a, summaries) = cluster_boxes(&boxes, &p).unwrap();
        assert_eq!(a.n_clusters(), 1);
        assert_eq!(summaries.len(), 1);
        assert_eq!(summaries[0].boxes, 5);
        assert_eq!((summaries[0].frame_min, summaries[0].frame_max), (0, 4));
    }

    #[test]
    fn same_frame_boxes_split_even_with_min_pts_one() {
        let p = TrackletParams {
            min_pts: 1,
            ..TrackletParams::default()
        };
        let boxes = vec![bx(1, 0, 0.0, 0.0, 2.0, 2.0), bx(2, 0, 0.0, 0.0, 2.0, 2.0)];
        let (a, _) = cluster_boxes(&boxes, &p).unwrap();
        assert_eq!(a.n_clusters(), 2);
        assert_ne!(a.cluster_of(1), a.cluster_of(2));
    }

    #[test]
    fn occlusion_gap_starts_a_new_cluster() {
        // A track that vanishes for 10 frames and reappears shifted comes
        // back as a second cluster: one true identity, two clusters.
        let p = TrackletParams {
            eps: 0.3,
            min_pts: 2,
            lambda: 1.0 / 30.0,
            max_distance: 1e9,
        };
        let mut boxes: Vec<FrameBox> = (0..5).map(|f| bx(f as u64, f, 10.0, 10.0, 5.0, 5.0)).collect();
        boxes.extend((15..20).map(|f| bx(f as u64, f, 40.0, 10.0, 5.0, 5.0)));
        let (a, _) = cluster_boxes(&boxes, &p).unwrap();
        assert_eq!(a.n_clusters(), 2);
    }

    #[test]
    fn relabel_merges_and_densifies() {
        let a = ClusterAssignment::new(vec![(0, 0), (1, 1), (2, 2), (3, 1), (4, NOISE)]).unwrap();
        let merged = apply_relabels(&a, &[(1, 1), (2, 1)]).unwrap();
        assert_eq!(merged.cluster_of(1), merged.cluster_of(2));
        assert_eq!(merged.cluster_of(1), merged.cluster_of(3));
        assert_eq!(merged.cluster_of(4), Some(NOISE));
        assert_eq!(merged.n_clusters(), 2);
    }

    #[test]
    fn empty_fix_list_is_identity() {
        let a = ClusterAssignment::new(vec![(0, 0), (1, 1), (2, NOISE)]).unwrap();
        assert_eq!(apply_relabels(&a, &[]).unwrap(), a);
    }

    #[test]
    fn unknown_cluster_fix_is_error() {
        let a = ClusterAssignment::new(vec![(0, 0)]).unwrap();
        assert!(apply_relabels(&a, &[(5, 0)]).is_err());
    }

    #[test]
    fn relabels_stay_dense_under_random_merges() {
        use rand::Rng;
        let mut rng = crate::rng::RngState::new(11).stream("relabel").rng();
        for _ in 0..50 {
            let n = rng.random_range(3..20);
            let k = rng.random_range(1..6i64);
            let entries: Vec<(u64, i64)> = (0..n)
                .map(|i| {
                    let c = rng.random_range(-1..k);
                    (i as u64, c)
                })
                .collect();
            // Densify the random labels first so the fixture is valid.
            let base = apply_relabels(
                &ClusterAssignment {
                    entries: entries.clone(),
                },
                &[],
            );
            let Ok(base) = base else { continue };
            let k = base.n_clusters() as i64;
            if k < 2 {
                continue;
            }
            let mut fixes: Vec<(i64, i64)> = Vec::new();
            for c in 0..k {
                if rng.random_bool(0.5) {
                    fixes.push((c, rng.random_range(0..2)));
                }
            }
            let out = apply_relabels(&base, &fixes).unwrap();
            // ClusterAssignment::new re-validates density; also check count sanity.
            assert!(out.n_clusters() <= base.n_clusters());
        }
    }
}
