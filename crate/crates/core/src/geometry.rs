//! Geometric kernels: exact nearest-neighbour queries, capsule distances and
//! voxel occupancy. All lengths are in centimetres.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Vec3, V3};
use crate::real::Real;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<V3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new(points: Vec<V3>) -> Result<Self> {
        Self::build(points, None)
    }

    pub fn with_labels(points: Vec<V3>, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} points",
                labels.len(),
                points.len()
            )));
        }
        Self::build(points, Some(labels))
    }

    fn build(points: Vec<V3>, labels: Option<Vec<u32>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("point cloud is empty".into()));
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        Ok(Self { points, labels })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> V3 {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[V3]) -> V3 {
    let mut s = V3::zero();
    for p in points {
        s = s + *p;
    }
    s.scale(1.0 / points.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Capsule {
    pub a: V3,
    pub b: V3,
    pub radius: f64,
}

impl Capsule {
    pub fn new(a: V3, b: V3, radius: f64) -> Result<Self> {
        if !(radius > 0.0) || !a.is_finite() || !b.is_finite() {
            return Err(Error::InvalidInput(format!(
                "capsule needs finite endpoints and positive radius, got r = {radius}"
            )));
        }
        Ok(Self { a, b, radius })
    }

    pub fn signed_distance(&self, p: &V3) -> f64 {
        capsule_signed_distance(p, self)
    }
}

/// Closest point on segment `[a, b]` to `p`.
#[inline]
pub fn closest_on_segment<T: Real>(p: &Vec3<T>, a: &Vec3<T>, b: &Vec3<T>) -> Vec3<T> {
    let ab = *b - *a;
    let len2 = ab.norm_sq();
    if len2.val() <= 1e-300 {
        return *a;
    }
    let t = ((*p - *a).dot(&ab) / len2).clamp(0.0, 1.0);
    *a + ab.scale(t)
}

/// Signed distance from `p` to the surface of the capsule `(a, b, r)`;
/// negative strictly inside.
#[inline]
pub fn capsule_sd<T: Real>(p: &Vec3<T>, a: &Vec3<T>, b: &Vec3<T>, r: T) -> T {
    let q = closest_on_segment(p, a, b);
    (*p - q).norm() - r
}

pub fn capsule_signed_distance(p: &V3, c: &Capsule) -> f64 {
    capsule_sd(p, &c.a, &c.b, c.radius)
}

/// Distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_distance<T: Real>(p1: &Vec3<T>, q1: &Vec3<T>, p2: &Vec3<T>, q2: &Vec3<T>) -> T {
    let (c1, c2) = closest_between_segments(p1, q1, p2, q2);
    (c1 - c2).norm()
}

/// Closest points between two segments (clamped parametric solve).
pub fn closest_between_segments<T: Real>(
    p1: &Vec3<T>,
    q1: &Vec3<T>,
    p2: &Vec3<T>,
    q2: &Vec3<T>,
) -> (Vec3<T>, Vec3<T>) {
    let d1 = *q1 - *p1;
    let d2 = *q2 - *p2;
    let r = *p1 - *p2;
    let a = d1.norm_sq();
    let e = d2.norm_sq();
    let f = d2.dot(&r);
    let eps = 1e-12;
    let (s, t);
    if a.val() <= eps && e.val() <= eps {
        return (*p1, *p2);
    }
    if a.val() <= eps {
        s = T::zero();
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e.val() <= eps {
            t = T::zero();
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let s0 = if denom.val() > eps * a.val() * e.val() {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                T::zero()
            };
            let t0 = (b * s0 + f) / e;
            if t0.val() < 0.0 {
                t = T::zero();
                s = (-c / a).clamp(0.0, 1.0);
            } else if t0.val() > 1.0 {
                t = T::one();
                s = ((b - c) / a).clamp(0.0, 1.0);
            } else {
                t = t0;
                s = s0;
            }
        }
    }
    (*p1 + d1.scale(s), *p2 + d2.scale(t))
}

/// Exact nearest-neighbour index over a fixed target set, accelerated by a
/// uniform hash grid. Ties resolve to the lowest target index.
pub struct NearestIndex<'a> {
    points: &'a [V3],
    origin: V3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl<'a> NearestIndex<'a> {
    pub fn new(points: &'a [V3]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("nearest-neighbour target is empty".into()));
        }
        let (lo, hi) = bounds(points);
        let ext = hi - lo;
        let vol = (ext.x.max(1e-6)) * (ext.y.max(1e-6)) * (ext.z.max(1e-6));
        // about two points per cell
        let mut cell = (2.0 * vol / points.len() as f64).cbrt();
        let max_extent = ext.x.max(ext.y).max(ext.z);
        cell = cell.max(max_extent / 128.0).max(1e-6);
        let dims = [
            (ext.x / cell).floor() as usize + 1,
            (ext.y / cell).floor() as usize + 1,
            (ext.z / cell).floor() as usize + 1,
        ];
        let n_cells = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; n_cells + 1];
        let cell_of: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::coords(&lo, cell, &dims, p);
                (c[2] * dims[1] + c[1]) * dims[0] + c[0]
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0usize; points.len()];
        // ascending point order within each cell
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        Ok(Self {
            points,
            origin: lo,
            cell,
            dims,
            starts,
            items,
        })
    }

    fn coords(origin: &V3, cell: f64, dims: &[usize; 3], p: &V3) -> [usize; 3] {
        let f = |v: f64, o: f64, n: usize| -> usize {
            let c = ((v - o) / cell).floor();
            if c < 0.0 {
                0
            } else {
                (c as usize).min(n - 1)
            }
        };
        [
            f(p.x, origin.x, dims[0]),
            f(p.y, origin.y, dims[1]),
            f(p.z, origin.z, dims[2]),
        ]
    }

    pub fn points(&self) -> &[V3] {
        self.points
    }

    /// Nearest target point to `q`: (distance, index).
    pub fn nearest(&self, q: &V3) -> (f64, usize) {
        let c = Self::coords(&self.origin, self.cell, &self.dims, q);
        // distance from q to the grid's bounding box, in cells, bounds the first useful ring
        let mut best = (f64::INFINITY, usize::MAX);
        let max_ring = self.dims[0].max(self.dims[1]).max(self.dims[2]);
        let outside = {
            let hi = self.origin
                + Vec3::new(
                    self.dims[0] as f64 * self.cell,
                    self.dims[1] as f64 * self.cell,
                    self.dims[2] as f64 * self.cell,
                );
            let dx = (self.origin.x - q.x).max(0.0).max(q.x - hi.x);
            let dy = (self.origin.y - q.y).max(0.0).max(q.y - hi.y);
            let dz = (self.origin.z - q.z).max(0.0).max(q.z - hi.z);
            (dx * dx + dy * dy + dz * dz).sqrt()
        };
        for ring in 0..=max_ring {
            self.visit_ring(c, ring, |i| {
                let d2 = (self.points[i] - *q).norm_sq();
                if d2 < best.0 || (d2 == best.0 && i < best.1) {
                    best = (d2, i);
                }
            });
            // unvisited cells are at least ring*cell from q's projection onto the grid box
            let inner = ring as f64 * self.cell;
            let bound = (outside * outside + inner * inner).sqrt();
            if best.1 != usize::MAX && best.0.sqrt() < bound {
                break;
            }
        }
        (best.0.sqrt(), best.1)
    }

    fn visit_ring(&self, c: [usize; 3], ring: usize, mut f: impl FnMut(usize)) {
        let r = ring as isize;
        let lo = |i: usize| c[i] as isize - r;
        let hi = |i: usize| c[i] as isize + r;
        for z in lo(2)..=hi(2) {
            if z < 0 || z >= self.dims[2] as isize {
                continue;
            }
            for y in lo(1)..=hi(1) {
                if y < 0 || y >= self.dims[1] as isize {
                    continue;
                }
                let on_shell_yz = z == lo(2) || z == hi(2) || y == lo(1) || y == hi(1);
                let xs: Box<dyn Iterator<Item = isize>> = if on_shell_yz {
                    Box::new(lo(0)..=hi(0))
                } else {
                    Box::new([lo(0), hi(0)].into_iter().take(if r == 0 { 1 } else { 2 }))
                };
                for x in xs {
                    if x < 0 || x >= self.dims[0] as isize {
                        continue;
                    }
                    let cell = (z as usize * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                    for &i in &self.items[self.starts[cell]..self.starts[cell + 1]] {
                        f(i);
                    }
                }
            }
        }
    }
}

pub fn bounds(points: &[V3]) -> (V3, V3) {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = Vec3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = Vec3::new(lo.x.min(p.x), lo.y.min(p.y), lo.z.min(p.z));
        hi = Vec3::new(hi.x.max(p.x), hi.y.max(p.y), hi.z.max(p.z));
    }
    (lo, hi)
}

/// For each query point, the distance to and index of its nearest target point.
pub fn nearest_distances(query: &PointCloud, target: &PointCloud) -> Result<Vec<(f64, usize)>> {
    nearest_distances_raw(&query.points, &target.points)
}

pub fn nearest_distances_raw(query: &[V3], target: &[V3]) -> Result<Vec<(f64, usize)>> {
    if query.is_empty() {
        return Err(Error::InvalidInput("nearest-neighbour query is empty".into()));
    }
    let index = NearestIndex::new(target)?;
    Ok(query.iter().map(|q| index.nearest(q)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    pub origin: V3,
    pub voxel_size: f64,
    pub dims: [usize; 3],
    pub occupancy: Vec<bool>,
}

impl VoxelGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupied_volume(&self) -> f64 {
        self.occupied_count() as f64 * self.voxel_size.powi(3)
    }

    pub fn is_occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.occupancy[self.index(i, j, k)]
    }
}

/// Cell index of coordinate `v` along one axis. Cell `i` spans
/// `(origin + i·s, origin + (i+1)·s]`; boundary points go to the lower cell
/// and the first cell is closed on both sides.
fn voxel_axis_index(v: f64, origin: f64, s: f64) -> usize {
    let c = ((v - origin) / s).ceil() - 1.0;
    if c < 0.0 {
        0
    } else {
        c as usize
    }
}

pub fn voxelize_occupancy(points: &PointCloud, voxel_size: f64) -> Result<VoxelGrid> {
    if !(voxel_size > 0.0) {
        return Err(Error::InvalidInput(format!("voxel size must be positive, got {voxel_size}")));
    }
    let (lo, _) = bounds(&points.points);
    let cells: Vec<[usize; 3]> = points
        .points
        .iter()
        .map(|p| {
            [
                voxel_axis_index(p.x, lo.x, voxel_size),
                voxel_axis_index(p.y, lo.y, voxel_size),
                voxel_axis_index(p.z, lo.z, voxel_size),
            ]
        })
        .collect();
    let mut dims = [1usize; 3];
    for c in &cells {
        for a in 0..3 {
            dims[a] = dims[a].max(c[a] + 1);
        }
    }
    let mut grid = VoxelGrid {
        origin: lo,
        voxel_size,
        dims,
        occupancy: vec![false; dims[0] * dims[1] * dims[2]],
    };
    for c in cells {
        let i = grid.index(c[0], c[1], c[2]);
        grid.occupancy[i] = true;
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<V3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                    rng.random_range(-scale..scale),
                )
            })
            .collect()
    }

    fn brute(q: &V3, t: &[V3]) -> (f64, usize) {
        let mut best = (f64::INFINITY, 0);
        for (i, p) in t.iter().enumerate() {
            let d = (*p - *q).norm();
            if d < best.0 {
                best = (d, i);
            }
        }
        best
    }

    #[test]
    fn nearest_identity_and_axis_cases() {
        let o = PointCloud::new(vec![V3::zero()]).unwrap();
        assert_eq!(nearest_distances(&o, &o).unwrap(), vec![(0.0, 0)]);
        let q = PointCloud::new(vec![Vec3::new(1.0, 0.0, 0.0)]).unwrap();
        let t = PointCloud::new(vec![V3::zero(), Vec3::new(3.0, 0.0, 0.0)]).unwrap();
        assert_eq!(nearest_distances(&q, &t).unwrap(), vec![(1.0, 0)]);
    }

    #[test]
    fn nearest_ties_pick_lowest_index() {
        let q = PointCloud::new(vec![V3::zero()]).unwrap();
        let t = PointCloud::new(vec![
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(-1.0, 0.0, 0.0),
            Vec3::new(0.0, 0.0, 1.0),
        ])
        .unwrap();
        assert_eq!(nearest_distances(&q, &t).unwrap()[0], (1.0, 1));
    }

    #[test]
    fn nearest_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let q = random_points(&mut rng, 100, 5.0);
        let mut t = random_points(&mut rng, 500, 3.0);
        t.push(Vec3::new(40.0, -2.0, 0.0));
        let got = nearest_distances_raw(&q, &t).unwrap();
        for (qi, g) in q.iter().zip(&got) {
            assert_eq!(*g, brute(qi, &t));
        }
        // far-away queries too
        let far = vec![Vec3::new(100.0, 50.0, -70.0), Vec3::new(-9.0, 0.0, 0.0)];
        for (qi, g) in far.iter().zip(nearest_distances_raw(&far, &t).unwrap()) {
            assert_eq!(g, brute(qi, &t));
        }
    }

    #[test]
    fn empty_cloud_is_rejected() {
        assert!(PointCloud::new(vec![]).is_err());
        assert!(nearest_distances_raw(&[V3::zero()], &[]).is_err());
    }

    #[test]
    fn capsule_axis_and_surface() {
        let c = Capsule::new(V3::zero(), Vec3::new(4.0, 0.0, 0.0), 1.0).unwrap();
        assert!((c.signed_distance(&Vec3::new(2.0, 0.0, 0.0)) + 1.0).abs() < 1e-15);
        assert!(c.signed_distance(&Vec3::new(2.0, 1.0, 0.0)).abs() < 1e-9);
        assert!(c.signed_distance(&Vec3::new(5.0, 0.0, 0.0)).abs() < 1e-9);
        let d = Vec3::new(-1.0, 1.0, 1.0).normalized();
        assert!(c.signed_distance(&d).abs() < 1e-9);
        assert!(Capsule::new(V3::zero(), V3::zero(), 0.0).is_err());
    }

    #[test]
    fn capsule_distance_agrees_with_dense_surface_sampling() {
        let c = Capsule::new(Vec3::new(-1.0, 0.5, 0.0), Vec3::new(2.0, 1.0, 1.0), 0.7).unwrap();
        let axis = (c.b - c.a).normalized();
        let u = axis.any_perpendicular();
        let v = axis.cross(&u);
        let len = (c.b - c.a).norm();
        let mut surf = Vec::new();
        let n = 120;
        for i in 0..=n {
            let s = len * i as f64 / n as f64;
            for k in 0..n {
                let ph = std::f64::consts::TAU * k as f64 / n as f64;
                surf.push(c.a + axis.scale(s) + (u.scale(ph.cos()) + v.scale(ph.sin())).scale(c.radius));
            }
        }
        for (end, dir) in [(c.a, -axis), (c.b, axis)] {
            for i in 0..=n / 2 {
                let th = std::f64::consts::FRAC_PI_2 * i as f64 / (n / 2) as f64;
                for k in 0..n {
                    let ph = std::f64::consts::TAU * k as f64 / n as f64;
                    let radial = (u.scale(ph.cos()) + v.scale(ph.sin())).scale(th.cos());
                    surf.push(end + (dir.scale(th.sin()) + radial).scale(c.radius));
                }
            }
        }
        // spacing is at most ~tau*r/n and len/n
        let res = (std::f64::consts::TAU * c.radius / n as f64).max(len / n as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for p in random_points(&mut rng, 200, 3.0) {
            let sd = c.signed_distance(&p);
            let (d, _) = brute(&p, &surf);
            assert!((sd.abs() - d).abs() <= res, "sd {sd} sampled {d}");
        }
    }

    #[test]
    fn capsule_distance_is_one_lipschitz() {
        let c = Capsule::new(Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 3.0, 0.0), 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_points(&mut rng, 300, 4.0);
        let b = random_points(&mut rng, 300, 4.0);
        for (p, q) in a.iter().zip(&b) {
            let diff = (c.signed_distance(p) - c.signed_distance(q)).abs();
            assert!(diff <= p.dist(q) + 1e-12);
        }
    }

    #[test]
    fn segment_distance_parallel_and_skew() {
        let d = segment_distance(
            &V3::zero(),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, 1.0, 0.0),
            &Vec3::new(1.0, 1.0, 0.0),
        );
        assert!((d - 1.0).abs() < 1e-12);
        let d = segment_distance(
            &Vec3::new(-1.0, 0.0, 0.0),
            &Vec3::new(1.0, 0.0, 0.0),
            &Vec3::new(0.0, -1.0, 2.0),
            &Vec3::new(0.0, 1.0, 2.0),
        );
        assert!((d - 2.0).abs() < 1e-12);
    }

    #[test]
    fn voxel_single_point_and_cube_corners() {
        let one = PointCloud::new(vec![Vec3::new(0.3, 0.2, 0.1)]).unwrap();
        let g = voxelize_occupancy(&one, 1.0).unwrap();
        assert_eq!(g.dims, [1, 1, 1]);
        assert_eq!(g.occupied_count(), 1);

        // every corner coordinate is either the origin (closed first cell) or exactly on
        // the boundary at 1.0, which belongs to the lower cell: all eight share cell 0
        let mut corners = Vec::new();
        for i in 0..8 {
            corners.push(Vec3::new((i & 1) as f64, ((i >> 1) & 1) as f64, ((i >> 2) & 1) as f64));
        }
        let g = voxelize_occupancy(&PointCloud::new(corners.clone()).unwrap(), 1.0).unwrap();
        assert_eq!(g.dims, [1, 1, 1]);
        assert_eq!(g.occupied_count(), 1);

        // half-size voxels: coordinates 0 and 1 land in cells 0 and 1 → 8 distinct cells
        let g = voxelize_occupancy(&PointCloud::new(corners).unwrap(), 0.5).unwrap();
        assert_eq!(g.dims, [2, 2, 2]);
        assert_eq!(g.occupied_count(), 8);
        assert!(voxelize_occupancy(&one, 0.0).is_err());
    }

    fn dense_ball(r: f64, step: f64) -> PointCloud {
        let n = (r / step).ceil() as i64;
        let mut pts = Vec::new();
        for i in -n..=n {
            for j in -n..=n {
                for k in -n..=n {
                    // irrational offset keeps samples off voxel boundaries
                    let p = Vec3::new(i as f64, j as f64, k as f64).scale(step) + Vec3::new(0.0137, 0.0071, 0.0029);
                    if p.norm() <= r {
                        pts.push(p);
                    }
                }
            }
        }
        PointCloud::new(pts).unwrap()
    }

    #[test]
    fn voxel_volume_of_sphere_and_monotone_refinement() {
        let r = 2.0;
        let ball = dense_ball(r, 0.04);
        let exact = 4.0 / 3.0 * std::f64::consts::PI * r.powi(3);
        // any-point occupancy over-counts the boundary layer: at s = r/10 the
        // excess is ~18%, bounded by the ball of radius r + sqrt(3)·s
        let s10 = r / 10.0;
        let coarse = voxelize_occupancy(&ball, s10).unwrap().occupied_volume();
        let outer = 4.0 / 3.0 * std::f64::consts::PI * (r + 3f64.sqrt() * s10).powi(3);
        assert!(coarse >= exact * 0.99 && coarse <= outer, "{coarse} vs [{exact}, {outer}]");
        let fine = voxelize_occupancy(&ball, r / 20.0).unwrap().occupied_volume();
        assert!((fine - exact).abs() / exact < 0.10, "{fine} vs {exact}");
        let mut prev = f64::INFINITY;
        for div in [2.0, 4.0, 6.0, 8.0, 10.0] {
            let v = voxelize_occupancy(&ball, r / div).unwrap().occupied_volume();
            assert!(v <= prev + 1e-9, "volume grew at r/{div}: {v} > {prev}");
            prev = v;
        }
    }
}
