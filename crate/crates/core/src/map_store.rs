//! Per-particle landmark maps.
//!
//! [`LandmarkMap`] is a persistent AVL tree keyed by landmark id. Cloning a
//! map is O(1); an insert or update copies only the root-to-leaf path, so
//! particles that share history share almost all of their landmark records.
//! Every node also carries the bounding box of the landmark means below it,
//! which lets association fetch nearby candidates without a full scan.

use std::collections::HashSet;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SlamError};
use crate::models::{MeasurementModel, Pose};

pub type LandmarkId = u64;

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkEstimate {
    pub id: LandmarkId,
    pub mean: Vector2<f64>,
    pub cov: Matrix2<f64>,
    pub observation_count: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Aabb {
    min: Vector2<f64>,
    max: Vector2<f64>,
}

impl Aabb {
    fn point(p: &Vector2<f64>) -> Self {
        Self { min: *p, max: *p }
    }

    fn union(&self, other: &Aabb) -> Self {
        Self {
            min: self.min.inf(&other.min),
            max: self.max.sup(&other.max),
        }
    }

    fn distance2(&self, p: &Vector2<f64>) -> f64 {
        let dx = (self.min.x - p.x).max(0.0).max(p.x - self.max.x);
        let dy = (self.min.y - p.y).max(0.0).max(p.y - self.max.y);
        dx * dx + dy * dy
    }
}

type Link = Option<Arc<Node>>;

#[derive(Debug, Clone)]
struct Node {
    entry: LandmarkEstimate,
    left: Link,
    right: Link,
    height: u8,
    size: usize,
    bbox: Aabb,
}

fn height(link: &Link) -> u8 {
    link.as_ref().map_or(0, |n| n.height)
}

fn size(link: &Link) -> usize {
    link.as_ref().map_or(0, |n| n.size)
}

impl Node {
    fn leaf(entry: LandmarkEstimate) -> Self {
        let bbox = Aabb::point(&entry.mean);
        Self {
            entry,
            left: None,
            right: None,
            height: 1,
            size: 1,
            bbox,
        }
    }

    fn refresh(&mut self) {
        self.height = 1 + height(&self.left).max(height(&self.right));
        self.size = 1 + size(&self.left) + size(&self.right);
        let mut bbox = Aabb::point(&self.entry.mean);
        for child in [&self.left, &self.right].into_iter().flatten() {
            bbox = bbox.union(&child.bbox);
        }
        self.bbox = bbox;
    }

    fn balance(&self) -> i16 {
        height(&self.left) as i16 - height(&self.right) as i16
    }
}

fn rotate_right(link: &mut Link) {
    let mut top = link.take().expect("rotation of empty subtree");
    let top_mut = Arc::make_mut(&mut top);
    let mut pivot = top_mut.left.take().expect("right rotation needs a left child");
    let pivot_mut = Arc::make_mut(&mut pivot);
    top_mut.left = pivot_mut.right.take();
    top_mut.refresh();
    pivot_mut.right = Some(top);
    pivot_mut.refresh();
    *link = Some(pivot);
}

fn rotate_left(link: &mut Link) {
    let mut top = link.take().expect("rotation of empty subtree");
    let top_mut = Arc::make_mut(&mut top);
    let mut pivot = top_mut.right.take().expect("left rotation needs a right child");
    let pivot_mut = Arc::make_mut(&mut pivot);
    top_mut.right = pivot_mut.left.take();
    top_mut.refresh();
    pivot_mut.left = Some(top);
    pivot_mut.refresh();
    *link = Some(pivot);
}

fn rebalance(link: &mut Link) {
    let Some(node) = link.as_mut() else { return };
    let balance = node.balance();
    if balance > 1 {
        let node = Arc::make_mut(node);
        if node.left.as_ref().is_some_and(|l| l.balance() < 0) {
            rotate_left(&mut node.left);
        }
        rotate_right(link);
    } else if balance < -1 {
        let node = Arc::make_mut(node);
        if node.right.as_ref().is_some_and(|r| r.balance() > 0) {
            rotate_right(&mut node.right);
        }
        rotate_left(link);
    }
}

fn insert_into(link: &mut Link, entry: LandmarkEstimate) {
    match link {
        None => *link = Some(Arc::new(Node::leaf(entry))),
        Some(arc) => {
            let node = Arc::make_mut(arc);
            match entry.id.cmp(&node.entry.id) {
                std::cmp::Ordering::Less => insert_into(&mut node.left, entry),
                std::cmp::Ordering::Greater => insert_into(&mut node.right, entry),
                std::cmp::Ordering::Equal => node.entry = entry,
            }
            node.refresh();
            rebalance(link);
        }
    }
}

fn replace_in(link: &mut Link, entry: LandmarkEstimate) {
    let Some(arc) = link else { return };
    let node = Arc::make_mut(arc);
    match entry.id.cmp(&node.entry.id) {
        std::cmp::Ordering::Less => replace_in(&mut node.left, entry),
        std::cmp::Ordering::Greater => replace_in(&mut node.right, entry),
        std::cmp::Ordering::Equal => node.entry = entry,
    }
    node.refresh();
}

fn contains(mut link: &Link, id: LandmarkId) -> bool {
    while let Some(node) = link {
        match id.cmp(&node.entry.id) {
            std::cmp::Ordering::Less => link = &node.left,
            std::cmp::Ordering::Greater => link = &node.right,
            std::cmp::Ordering::Equal => return true,
        }
    }
    false
}

/// Persistent landmark map with structural sharing between versions.
#[derive(Debug, Clone, Default)]
pub struct LandmarkMap {
    root: Link,
    next_id: LandmarkId,
}

impl LandmarkMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        size(&self.root)
    }

    pub fn is_empty(&self) -> bool {
        self.root.is_none()
    }

    pub fn height(&self) -> u8 {
        height(&self.root)
    }

    pub fn get(&self, id: LandmarkId) -> Option<&LandmarkEstimate> {
        let mut link = &self.root;
        while let Some(node) = link {
            match id.cmp(&node.entry.id) {
                std::cmp::Ordering::Less => link = &node.left,
                std::cmp::Ordering::Greater => link = &node.right,
                std::cmp::Ordering::Equal => return Some(&node.entry),
            }
        }
        None
    }

    /// Id the next [`LandmarkMap::insert_new`] will hand out.
    pub fn next_id(&self) -> LandmarkId {
        self.next_id
    }

    /// Stores `estimate` under a fresh id and returns that id.
    pub fn insert_new(&mut self, mut estimate: LandmarkEstimate) -> LandmarkId {
        let id = self.next_id;
        estimate.id = id;
        self.insert(estimate);
        id
    }

    /// Inserts or replaces the record with `estimate.id`.
    pub fn insert(&mut self, estimate: LandmarkEstimate) {
        self.next_id = self.next_id.max(estimate.id + 1);
        insert_into(&mut self.root, estimate);
    }

    /// Replaces an existing record; returns `false` if the id is unknown.
    pub fn update(&mut self, estimate: LandmarkEstimate) -> bool {
        // check presence first so a miss does not copy the path
        if !contains(&self.root, estimate.id) {
            return false;
        }
        replace_in(&mut self.root, estimate);
        true
    }

    /// In-order (ascending id) iteration.
    pub fn iter(&self) -> impl Iterator<Item = &LandmarkEstimate> {
        let mut stack: Vec<&Node> = Vec::new();
        let mut cursor = self.root.as_deref();
        std::iter::from_fn(move || {
            while let Some(node) = cursor {
                stack.push(node);
                cursor = node.left.as_deref();
            }
            let node = stack.pop()?;
            cursor = node.right.as_deref();
            Some(&node.entry)
        })
    }

    /// Landmarks whose mean lies within `radius` of `center`, ascending id.
    pub fn within_radius(&self, center: &Vector2<f64>, radius: f64) -> Vec<&LandmarkEstimate> {
        fn walk<'a>(link: &'a Link, c: &Vector2<f64>, r2: f64, out: &mut Vec<&'a LandmarkEstimate>) {
            let Some(node) = link else { return };
            if node.bbox.distance2(c) > r2 {
                return;
            }
            walk(&node.left, c, r2, out);
            if (node.entry.mean - c).norm_squared() <= r2 {
                out.push(&node.entry);
            }
            walk(&node.right, c, r2, out);
        }
        let mut out = Vec::new();
        walk(&self.root, center, radius * radius, &mut out);
        out
    }

    /// Number of this map's records that are physically shared with `other`.
    pub fn shared_records(&self, other: &LandmarkMap) -> usize {
        fn collect(link: &Link, out: &mut HashSet<*const Node>) {
            if let Some(n) = link {
                out.insert(Arc::as_ptr(n));
                collect(&n.left, out);
                collect(&n.right, out);
            }
        }
        fn count(link: &Link, theirs: &HashSet<*const Node>) -> usize {
            match link {
                None => 0,
                // a shared node implies its whole subtree is shared
                Some(n) if theirs.contains(&Arc::as_ptr(n)) => n.size,
                Some(n) => count(&n.left, theirs) + count(&n.right, theirs),
            }
        }
        let mut theirs = HashSet::new();
        collect(&other.root, &mut theirs);
        count(&self.root, &theirs)
    }

    #[cfg(test)]
    fn check_invariants(&self) {
        fn walk(link: &Link, lo: Option<u64>, hi: Option<u64>) -> (u8, usize) {
            let Some(n) = link else { return (0, 0) };
            assert!(lo.is_none_or(|l| n.entry.id > l));
            assert!(hi.is_none_or(|h| n.entry.id < h));
            let (hl, sl) = walk(&n.left, lo, Some(n.entry.id));
            let (hr, sr) = walk(&n.right, Some(n.entry.id), hi);
            assert!((hl as i16 - hr as i16).abs() <= 1, "unbalanced at {}", n.entry.id);
            assert_eq!(n.height, 1 + hl.max(hr));
            assert_eq!(n.size, 1 + sl + sr);
            (n.height, n.size)
        }
        walk(&self.root, None, None);
    }
}

/// Chi-square gates on the squared Mahalanobis distance of an innovation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gates {
    pub chi2_match: f64,
    pub chi2_new: f64,
}

impl Default for Gates {
    fn default() -> Self {
        // 95% and 99% quantiles of chi-square with two degrees of freedom
        Self {
            chi2_match: 5.991,
            chi2_new: 9.210,
        }
    }
}

impl Gates {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.chi2_match && self.chi2_match < self.chi2_new) {
            return Err(SlamError::Config(format!(
                "gates need 0 < match < new (got {} / {})",
                self.chi2_match, self.chi2_new
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssociationSet {
    /// `(landmark id, measurement index)` pairs.
    pub matched: Vec<(LandmarkId, usize)>,
    pub new_landmarks: Vec<usize>,
    pub discarded: Vec<usize>,
}

/// `G_x P G_x^T + G_m Sigma G_m^T + R`, Jacobians at `(pose_point, lm.mean)`.
pub fn innovation_cov<M: MeasurementModel + ?Sized>(
    lm: &LandmarkEstimate,
    pose_cov: &Matrix3<f64>,
    pose_point: &Pose,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<Matrix2<f64>> {
    let gx = model.jacobian_pose(pose_point, &lm.mean)?;
    let gm = model.jacobian_landmark(pose_point, &lm.mean)?;
    let l = gx * pose_cov * gx.transpose() + gm * lm.cov * gm.transpose() + r;
    let l = (l + l.transpose()) * 0.5;
    if l.cholesky().is_none() {
        return Err(SlamError::NotPositiveDefinite("innovation covariance"));
    }
    Ok(l)
}

fn mahalanobis2<M: MeasurementModel + ?Sized>(
    lm: &LandmarkEstimate,
    pose_cov: &Matrix3<f64>,
    pose_point: &Pose,
    z: &Vector2<f64>,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<f64> {
    let nu = model.residual(z, &model.predict(pose_point, &lm.mean)?);
    let l = innovation_cov(lm, pose_cov, pose_point, r, model)?;
    let chol = l.cholesky().ok_or(SlamError::NotPositiveDefinite("innovation covariance"))?;
    Ok(nu.dot(&chol.solve(&nu)))
}

/// Greedy one-to-one nearest-neighbour association over an explicit candidate list.
pub fn associate_candidates<M: MeasurementModel + ?Sized>(
    candidates: &[&LandmarkEstimate],
    pose_cov: &Matrix3<f64>,
    pose_point: &Pose,
    z_batch: &[Vector2<f64>],
    r: &Matrix2<f64>,
    gates: &Gates,
    model: &M,
) -> AssociationSet {
    let mut out = AssociationSet::default();
    let mut claimed = vec![false; candidates.len()];
    for (k, z) in z_batch.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (c, lm) in candidates.iter().enumerate() {
            if claimed[c] {
                continue;
            }
            // a candidate the model cannot score (zero range) is simply skipped
            let Ok(d2) = mahalanobis2(lm, pose_cov, pose_point, z, r, model) else { continue };
            if best.is_none_or(|(_, b)| d2 < b) {
                best = Some((c, d2));
            }
        }
        match best {
            Some((c, d2)) if d2 <= gates.chi2_match => {
                claimed[c] = true;
                out.matched.push((candidates[c].id, k));
            }
            Some((_, d2)) if d2 <= gates.chi2_new => out.discarded.push(k),
            _ => out.new_landmarks.push(k),
        }
    }
    out
}

/// Extra search radius, beyond the measured range, used to prune association
/// candidates: five range standard deviations, three pose position standard
/// deviations and a fixed `slack`.
pub fn search_margin(pose_cov: &Matrix3<f64>, r: &Matrix2<f64>, slack: f64) -> f64 {
    5.0 * r[(0, 0)].max(0.0).sqrt() + 3.0 * pose_cov[(0, 0)].max(pose_cov[(1, 1)]).max(0.0).sqrt() + slack
}

/// Associates a measurement batch against `map` from the pose estimate
/// `(pose_point, pose_cov)`.
#[allow(clippy::too_many_arguments)]
pub fn associate<M: MeasurementModel + ?Sized>(
    map: &LandmarkMap,
    pose_cov: &Matrix3<f64>,
    pose_point: &Pose,
    z_batch: &[Vector2<f64>],
    r: &Matrix2<f64>,
    gates: &Gates,
    slack: f64,
    model: &M,
) -> AssociationSet {
    if z_batch.is_empty() {
        return AssociationSet::default();
    }
    let reach = z_batch
        .iter()
        .map(|z| model.candidate_radius(z))
        .try_fold(0.0f64, |acc, r| r.map(|r| acc.max(r)));
    let candidates: Vec<&LandmarkEstimate> = match reach {
        Some(reach) => map.within_radius(&pose_point.position(), reach + search_margin(pose_cov, r, slack)),
        None => map.iter().collect(),
    };
    associate_candidates(&candidates, pose_cov, pose_point, z_batch, r, gates, model)
}

/// New landmark from a single observation: mean `g^-1(pose, z)` and
/// covariance `G_m^-1 R G_m^-T`.
pub fn init_landmark<M: MeasurementModel + ?Sized>(
    id: LandmarkId,
    pose: &Pose,
    z: &Vector2<f64>,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<LandmarkEstimate> {
    let mean = model.inverse(pose, z)?;
    let gm_inv = model
        .jacobian_landmark(pose, &mean)?
        .try_inverse()
        .ok_or(SlamError::NotPositiveDefinite("landmark jacobian is singular"))?;
    let cov = gm_inv * r * gm_inv.transpose();
    let cov = (cov + cov.transpose()) * 0.5;
    Ok(LandmarkEstimate {
        id,
        mean,
        cov,
        observation_count: 1,
    })
}

/// EKF correction of one landmark from a measurement taken at `pose`.
pub fn ekf_update<M: MeasurementModel + ?Sized>(
    lm: &LandmarkEstimate,
    pose: &Pose,
    z: &Vector2<f64>,
    r: &Matrix2<f64>,
    model: &M,
) -> Result<LandmarkEstimate> {
    let g = model.jacobian_landmark(pose, &lm.mean)?;
    let s = g * lm.cov * g.transpose() + r;
    let s_inv = s
        .cholesky()
        .ok_or(SlamError::NotPositiveDefinite("landmark innovation covariance"))?
        .inverse();
    let gain = lm.cov * g.transpose() * s_inv;
    let nu = model.residual(z, &model.predict(pose, &lm.mean)?);
    let cov = (Matrix2::identity() - gain * g) * lm.cov;
    Ok(LandmarkEstimate {
        id: lm.id,
        mean: lm.mean + gain * nu,
        cov: (cov + cov.transpose()) * 0.5,
        observation_count: lm.observation_count + 1,
    })
}
