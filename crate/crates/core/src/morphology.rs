//! Pore-network descriptors computed from binary masks.
//!
//! Lengths are returned in micrometres: pixel quantities are multiplied by
//! `pixel_size`, and specific surface area is divided by it.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{porosity_of_mask, BinaryMask};

/// h-maxima depth used to seed the watershed, in pixels.
pub const H_MAXIMA: f64 = 2.0;

/// Stand-in for infinity that keeps the parabola algebra finite.
const FAR: f64 = 1e12;

const N8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Euclidean distance (pixels) from each pore pixel to the nearest solid
/// pixel, with everything outside the image counted as solid.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DistanceField {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }
}

/// Squared 1-D distance transform of a sampled function (lower envelope of
/// parabolas). Every input row must contain at least one finite sample.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let sep = |p: usize, q: usize| ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..f.len() {
        let mut s = sep(v[k], q);
        while s <= z[k] {
            k -= 1;
            s = sep(v[k], q);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance transform.
pub fn distance_transform(mask: &BinaryMask) -> DistanceField {
    let (w, h) = (mask.width(), mask.height());
    // one-pixel solid frame makes the boundary solid
    let (pw, ph) = (w + 2, h + 2);
    let mut g = vec![0.0; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if mask.is_pore(x, y) {
                g[(y + 1) * pw + x + 1] = FAR;
            }
        }
    }
    let n = pw.max(ph);
    let (mut f, mut out) = (vec![0.0; n], vec![0.0; n]);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    for x in 0..pw {
        for y in 0..ph {
            f[y] = g[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            g[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        f[..pw].copy_from_slice(&g[y * pw..(y + 1) * pw]);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        g[y * pw..(y + 1) * pw].copy_from_slice(&out[..pw]);
    }
    let mut data = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            data.push(g[(y + 1) * pw + x + 1].sqrt());
        }
    }
    DistanceField { width: w, height: h, data }
}

#[derive(PartialEq)]
struct Item {
    key: f64,
    seq: u64,
    idx: usize,
}

impl Eq for Item {}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Item {
    // max-heap on key, FIFO among equal keys
    fn cmp(&self, other: &Self) -> Ordering {
        self.key.total_cmp(&other.key).then_with(|| other.seq.cmp(&self.seq))
    }
}

fn neighbours8(idx: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = ((idx % w) as isize, (idx / w) as isize);
    N8.iter().filter_map(move |&(dx, dy)| {
        let (nx, ny) = (x + dx, y + dy);
        (nx >= 0 && ny >= 0 && nx < w as isize && ny < h as isize).then(|| ny as usize * w + nx as usize)
    })
}

/// Watershed basins of the distance field plus the ridges between them.
#[derive(Clone, Debug)]
pub struct PorePartition {
    pub width: usize,
    pub height: usize,
    /// 0 on solid, basin id starting at 1 on pore.
    pub labels: Vec<u32>,
    pub n_basins: usize,
    /// Ridge pixels per adjacent basin pair `(a, b)` with `a < b`.
    pub ridges: HashMap<(u32, u32), Vec<usize>>,
}

/// Reconstruction by dilation of `f - h` under `f` over the pore phase.
fn h_maxima_reconstruction(dt: &DistanceField, pore: &[bool], h: f64) -> Vec<f64> {
    let (w, hh) = (dt.width, dt.height);
    let mut r: Vec<f64> = dt.data.iter().map(|&v| (v - h).max(0.0)).collect();
    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    for (i, &p) in pore.iter().enumerate() {
        if p {
            heap.push(Item { key: r[i], seq, idx: i });
            seq += 1;
        }
    }
    while let Some(Item { key, idx, .. }) = heap.pop() {
        if key < r[idx] {
            continue;
        }
        for q in neighbours8(idx, w, hh) {
            if !pore[q] {
                continue;
            }
            let cand = key.min(dt.data[q]);
            if cand > r[q] {
                r[q] = cand;
                heap.push(Item { key: cand, seq, idx: q });
                seq += 1;
            }
        }
    }
    r
}

/// Labels regional maxima plateaus of `r` on the pore phase.
fn regional_maxima(r: &[f64], pore: &[bool], w: usize, h: usize) -> (Vec<u32>, usize) {
    const TOL: f64 = 1e-9;
    let mut markers = vec![0u32; r.len()];
    let mut seen = vec![false; r.len()];
    let mut n = 0;
    let mut queue = VecDeque::new();
    let mut plateau = Vec::new();
    for start in 0..r.len() {
        if !pore[start] || seen[start] {
            continue;
        }
        plateau.clear();
        let level = r[start];
        let mut is_max = true;
        seen[start] = true;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            plateau.push(p);
            for q in neighbours8(p, w, h) {
                if !pore[q] {
                    continue;
                }
                if (r[q] - level).abs() <= TOL {
                    if !seen[q] {
                        seen[q] = true;
                        queue.push_back(q);
                    }
                } else if r[q] > level {
                    is_max = false;
                }
            }
        }
        if is_max {
            n += 1;
            for &p in &plateau {
                markers[p] = n as u32;
            }
        }
    }
    (markers, n)
}

/// Marker-controlled watershed on the descending distance field.
pub fn pore_partition(mask: &BinaryMask, dt: &DistanceField) -> PorePartition {
    let (w, h) = (mask.width(), mask.height());
    let pore: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let r = h_maxima_reconstruction(dt, &pore, H_MAXIMA);
    let (mut labels, n_basins) = regional_maxima(&r, &pore, w, h);

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut queued = vec![false; labels.len()];
    for i in 0..labels.len() {
        if labels[i] != 0 {
            queued[i] = true;
            for q in neighbours8(i, w, h) {
                if pore[q] && labels[q] == 0 && !queued[q] {
                    queued[q] = true;
                    heap.push(Item { key: dt.data[q], seq, idx: q });
                    seq += 1;
                }
            }
        }
    }
    while let Some(Item { idx, .. }) = heap.pop() {
        // take the label of the highest already-labelled neighbour
        let mut best: Option<(f64, u32)> = None;
        for q in neighbours8(idx, w, h) {
            if labels[q] != 0 && best.is_none_or(|(v, _)| dt.data[q] > v) {
                best = Some((dt.data[q], labels[q]));
            }
        }
        labels[idx] = best.expect("queued pixels touch a labelled pixel").1;
        for q in neighbours8(idx, w, h) {
            if pore[q] && labels[q] == 0 && !queued[q] {
                queued[q] = true;
                heap.push(Item { key: dt.data[q], seq, idx: q });
                seq += 1;
            }
        }
    }

    let mut ridges: HashMap<(u32, u32), Vec<usize>> = HashMap::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let a = labels[i];
            if a == 0 {
                continue;
            }
            let mut partners: Vec<u32> = Vec::new();
            for (dx, dy) in [(1isize, 0isize), (-1, 0), (0, 1), (0, -1)] {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                    continue;
                }
                let b = labels[ny as usize * w + nx as usize];
                if b > a && !partners.contains(&b) {
                    partners.push(b);
                }
            }
            for b in partners {
                ridges.entry((a, b)).or_default().push(i);
            }
        }
    }
    PorePartition { width: w, height: h, labels, n_basins, ridges }
}

fn require_pore(mask: &BinaryMask, what: &str) -> Result<()> {
    if mask.pore_count() == 0 {
        return Err(Error::UndefinedMetric(format!("{what} is undefined at zero porosity")));
    }
    Ok(())
}

fn basin_maxima(part: &PorePartition, dt: &DistanceField) -> Vec<f64> {
    let mut maxima = vec![0.0f64; part.n_basins];
    for (i, &l) in part.labels.iter().enumerate() {
        if l > 0 {
            let m = &mut maxima[l as usize - 1];
            *m = m.max(dt.data[i]);
        }
    }
    maxima
}

fn avg_radius_px(part: &PorePartition, dt: &DistanceField) -> f64 {
    let maxima = basin_maxima(part, dt);
    maxima.iter().sum::<f64>() / maxima.len() as f64
}

/// Mean over pore bodies of the largest inscribed radius.
pub fn average_pore_radius(mask: &BinaryMask, pixel_size: f64) -> Result<f64> {
    require_pore(mask, "average pore radius")?;
    let dt = distance_transform(mask);
    let part = pore_partition(mask, &dt);
    Ok(avg_radius_px(&part, &dt) * pixel_size)
}

fn throat_radius_px(part: &PorePartition, dt: &DistanceField) -> Option<f64> {
    if part.ridges.is_empty() {
        return None;
    }
    let mut keys: Vec<_> = part.ridges.keys().copied().collect();
    keys.sort_unstable();
    let (mut num, mut den) = (0.0, 0.0);
    for k in keys {
        let px = &part.ridges[&k];
        let radius = px.iter().map(|&i| dt.data[i]).fold(0.0, f64::max);
        num += radius * px.len() as f64;
        den += px.len() as f64;
    }
    Some(num / den)
}

/// Ridge-length weighted mean throat radius. Each throat's radius is the
/// largest inscribed distance along the ridge separating two basins; with no
/// throats the average pore radius is returned instead.
pub fn weighted_throat_radius(mask: &BinaryMask, pixel_size: f64) -> Result<f64> {
    require_pore(mask, "throat radius")?;
    let dt = distance_transform(mask);
    let part = pore_partition(mask, &dt);
    let px = throat_radius_px(&part, &dt).unwrap_or_else(|| avg_radius_px(&part, &dt));
    Ok(px * pixel_size)
}

/// Separable Gaussian blur with replicate padding.
fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + clamp(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
    out
}

/// Total length of the 0.5 iso-contour of `f` by marching squares.
fn contour_length(f: &[f64], w: usize, h: usize) -> f64 {
    const ISO: f64 = 0.5;
    let lerp = |a: f64, b: f64| (ISO - a) / (b - a);
    let mut total = 0.0;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            // corners: 0 top-left, 1 top-right, 2 bottom-right, 3 bottom-left
            let v = [f[y * w + x], f[y * w + x + 1], f[(y + 1) * w + x + 1], f[(y + 1) * w + x]];
            let inside: Vec<bool> = v.iter().map(|&c| c >= ISO).collect();
            let n_in = inside.iter().filter(|&&b| b).count();
            if n_in == 0 || n_in == 4 {
                continue;
            }
            // crossing point on each edge that changes sign
            let corner = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
            let mut pts: Vec<(usize, (f64, f64))> = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if inside[a] != inside[b] {
                    let t = lerp(v[a], v[b]);
                    let (pa, pb) = (corner[a], corner[b]);
                    pts.push((e, (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))));
                }
            }
            let dist = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt();
            if pts.len() == 2 {
                total += dist(pts[0].1, pts[1].1);
            } else {
                // saddle: pair edges according to the cell-centre value
                let centre_in = v.iter().sum::<f64>() / 4.0 >= ISO;
                let (p0, p1, p2, p3) = (pts[0].1, pts[1].1, pts[2].1, pts[3].1);
                if centre_in == inside[0] {
                    total += dist(p0, p1) + dist(p2, p3);
                } else {
                    total += dist(p3, p0) + dist(p1, p2);
                }
            }
        }
    }
    total
}

/// Pore-solid interface length per unit image area, in 1/µm. The interface
/// is the 0.5 level set of the mask after a σ = 1 px Gaussian blur.
pub fn specific_surface_area(mask: &BinaryMask, pixel_size: f64) -> f64 {
    let (w, h) = (mask.width(), mask.height());
    let n_pore = mask.pore_count();
    if n_pore == 0 || n_pore == w * h {
        return 0.0;
    }
    let f: Vec<f64> = mask.data().iter().map(|&v| v as f64).collect();
    let smooth = gaussian_blur(&f, w, h, 1.0);
    contour_length(&smooth, w, h) / (w * h) as f64 / pixel_size
}

/// Multi-source 8-neighbour Dijkstra over pore pixels.
fn geodesic_from(pore: &[bool], w: usize, h: usize, sources: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut dist = vec![f64::INFINITY; pore.len()];
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    for s in sources {
        if pore[s] {
            dist[s] = 0.0;
            heap.push(Item { key: -0.0, seq, idx: s });
            seq += 1;
        }
    }
    while let Some(Item { key, idx, .. }) = heap.pop() {
        let d = -key;
        if d > dist[idx] {
            continue;
        }
        let (x, y) = (idx % w, idx / w);
        for q in neighbours8(idx, w, h) {
            if !pore[q] {
                continue;
            }
            let diag = q % w != x && q / w != y;
            let nd = d + if diag { std::f64::consts::SQRT_2 } else { 1.0 };
            if nd < dist[q] {
                dist[q] = nd;
                heap.push(Item { key: -nd, seq, idx: q });
                seq += 1;
            }
        }
    }
    dist
}

/// Geodesic tortuosity. For each axis and each of its two faces, the
/// shortest in-pore path from every connected pore pixel on that face to the
/// opposite face is divided by the straight span; the per-face means are
/// averaged over the faces of every percolating axis.
pub fn tortuosity(mask: &BinaryMask) -> Result<f64> {
    let (w, h) = (mask.width(), mask.height());
    if w < 2 || h < 2 {
        return Err(Error::Dimension("tortuosity needs at least 2x2 pixels".into()));
    }
    let pore: Vec<bool> = mask.data().iter().map(|&v| v == 1).collect();
    let mut face_means = Vec::new();
    let faces: [(Vec<usize>, Vec<usize>, f64); 2] = [
        ((0..w).collect(), (0..w).map(|x| (h - 1) * w + x).collect(), (h - 1) as f64),
        ((0..h).map(|y| y * w).collect(), (0..h).map(|y| y * w + w - 1).collect(), (w - 1) as f64),
    ];
    for (a, b, span) in &faces {
        for (inlet, outlet) in [(a, b), (b, a)] {
            let dist = geodesic_from(&pore, w, h, outlet.iter().copied());
            let reached: Vec<f64> = inlet.iter().map(|&i| dist[i]).filter(|d| d.is_finite()).collect();
            if !reached.is_empty() {
                face_means.push(reached.iter().sum::<f64>() / reached.len() as f64 / span);
            }
        }
    }
    if face_means.is_empty() {
        return Err(Error::NonPercolating);
    }
    Ok(face_means.iter().sum::<f64>() / face_means.len() as f64)
}

/// Morphology bundle for one mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoreNetworkStats {
    pub porosity: f64,
    /// µm
    pub avg_pore_radius: f64,
    /// 1/µm
    pub specific_surface_area: f64,
    /// `None` when no axis percolates.
    pub tortuosity: Option<f64>,
    /// µm
    pub weighted_throat_radius: f64,
}

/// Computes every descriptor, sharing one distance field and partition.
pub fn analyze(mask: &BinaryMask, pixel_size: f64) -> Result<PoreNetworkStats> {
    require_pore(mask, "pore-network statistics")?;
    let dt = distance_transform(mask);
    let part = pore_partition(mask, &dt);
    let avg = avg_radius_px(&part, &dt);
    let throat = throat_radius_px(&part, &dt).unwrap_or(avg);
    let tortuosity = match tortuosity(mask) {
        Ok(t) => Some(t),
        Err(Error::NonPercolating) => None,
        Err(e) => return Err(e),
    };
    Ok(PoreNetworkStats {
        porosity: porosity_of_mask(mask)?,
        avg_pore_radius: avg * pixel_size,
        specific_surface_area: specific_surface_area(mask, pixel_size),
        tortuosity,
        weighted_throat_radius: throat * pixel_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::Geometric;
    use proptest::prelude::*;

    fn disc(n: usize, cx: f64, cy: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(n, n, |x, y| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
    }

    /// Brute-force nearest solid pixel including the virtual frame.
    fn brute_dt(mask: &BinaryMask) -> Vec<f64> {
        let (w, h) = (mask.width() as isize, mask.height() as isize);
        let mut solid = Vec::new();
        for y in -1..=h {
            for x in -1..=w {
                if x < 0 || y < 0 || x >= w || y >= h || !mask.is_pore(x as usize, y as usize) {
                    solid.push((x, y));
                }
            }
        }
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if !mask.is_pore(x as usize, y as usize) {
                    out.push(0.0);
                    continue;
                }
                let d2 = solid.iter().map(|&(sx, sy)| (sx - x).pow(2) + (sy - y).pow(2)).min().unwrap();
                out.push((d2 as f64).sqrt());
            }
        }
        out
    }

    #[test]
    fn dt_examples() {
        let mut single = BinaryMask::zeros(5, 5);
        single.set(2, 2, true);
        assert_eq!(distance_transform(&single).at(2, 2), 1.0);
        let open = BinaryMask::from_fn(21, 21, |_, _| true);
        assert_eq!(distance_transform(&open).at(10, 10), 11.0);
        assert!(distance_transform(&BinaryMask::zeros(7, 4)).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dt_matches_brute_force() {
        let m = BinaryMask::from_fn(23, 17, |x, y| (x * 31 + y * 17 + x * y) % 7 != 0);
        let dt = distance_transform(&m);
        for (a, b) in dt.data.iter().zip(brute_dt(&m)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn disc_radius() {
        let r = average_pore_radius(&disc(160, 80.0, 80.0, 50.0), 1.0).unwrap();
        assert!((r - 50.0).abs() <= 1.0, "{r}");
    }

    #[test]
    fn channel_radius() {
        let m = BinaryMask::from_fn(100, 100, |x, _| (40..60).contains(&x));
        let r = average_pore_radius(&m, 1.0).unwrap();
        assert!((r - 10.0).abs() <= 0.5, "{r}");
    }

    #[test]
    fn two_disc_radius() {
        let a = disc(120, 25.0, 60.0, 10.0);
        let b = disc(120, 75.0, 60.0, 30.0);
        let m = BinaryMask::from_fn(120, 120, |x, y| a.is_pore(x, y) || b.is_pore(x, y));
        let r = average_pore_radius(&m, 1.0).unwrap();
        assert!((r - 20.0).abs() <= 1.0, "{r}");
    }

    #[test]
    fn zero_porosity_is_undefined() {
        let m = BinaryMask::zeros(10, 10);
        assert!(matches!(average_pore_radius(&m, 1.0), Err(Error::UndefinedMetric(_))));
        assert!(matches!(weighted_throat_radius(&m, 1.0), Err(Error::UndefinedMetric(_))));
    }

    fn dumbbell(half_width: usize) -> BinaryMask {
        let (a, b) = (disc(200, 50.0, 60.0, 30.0), disc(200, 150.0, 60.0, 30.0));
        BinaryMask::from_fn(200, 120, |x, y| {
            let slit = (50..150).contains(&x) && (60 - half_width..60 + half_width).contains(&y);
            a.is_pore(x, y) || b.is_pore(x, y) || slit
        })
    }

    #[test]
    fn slit_throat_radius() {
        let r5 = weighted_throat_radius(&dumbbell(5), 1.0).unwrap();
        assert!((r5 - 5.0).abs() <= 1.0, "{r5}");
        let r10 = weighted_throat_radius(&dumbbell(10), 1.0).unwrap();
        assert!((r10 - 10.0).abs() <= 1.0, "{r10}");
    }

    #[test]
    fn isolated_disc_throat_falls_back() {
        let m = disc(100, 50.0, 50.0, 20.0);
        assert_eq!(weighted_throat_radius(&m, 1.0).unwrap(), average_pore_radius(&m, 1.0).unwrap());
    }

    #[test]
    fn ssa_examples() {
        assert_eq!(specific_surface_area(&BinaryMask::zeros(20, 20), 1.0), 0.0);
        assert_eq!(specific_surface_area(&BinaryMask::from_fn(20, 20, |_, _| true), 1.0), 0.0);
        let m = disc(480, 240.0, 240.0, 50.0);
        let s = specific_surface_area(&m, 1.0);
        let expected = 2.0 * std::f64::consts::PI * 50.0 / (480.0 * 480.0);
        assert!((s / expected - 1.0).abs() <= 0.03, "{s} vs {expected}");
        assert!((specific_surface_area(&m, 0.5) - 2.0 * s).abs() < 1e-15);
    }

    #[test]
    fn straight_channel_tortuosity() {
        let m = BinaryMask::from_fn(64, 64, |x, _| (20..30).contains(&x));
        assert!((tortuosity(&m).unwrap() - 1.0).abs() <= 0.01);
        assert!(matches!(tortuosity(&BinaryMask::zeros(10, 10)), Err(Error::NonPercolating)));
    }

    /// Bellman-Ford relaxation over the same 8-neighbour pixel graph.
    fn bellman_ford_tortuosity(m: &BinaryMask) -> f64 {
        let (w, h) = (m.width(), m.height());
        let faces = |sources: &dyn Fn(usize, usize) -> bool, inlet: &dyn Fn(usize, usize) -> bool, span: f64| {
            let mut d = vec![f64::INFINITY; w * h];
            for y in 0..h {
                for x in 0..w {
                    if m.is_pore(x, y) && sources(x, y) {
                        d[y * w + x] = 0.0;
                    }
                }
            }
            loop {
                let mut changed = false;
                for y in 0..h {
                    for x in 0..w {
                        if !m.is_pore(x, y) {
                            continue;
                        }
                        for &(dx, dy) in &N8 {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                                continue;
                            }
                            let (nx, ny) = (nx as usize, ny as usize);
                            if !m.is_pore(nx, ny) {
                                continue;
                            }
                            let c = if dx != 0 && dy != 0 { 2f64.sqrt() } else { 1.0 };
                            if d[ny * w + nx] + c < d[y * w + x] - 1e-12 {
                                d[y * w + x] = d[ny * w + nx] + c;
                                changed = true;
                            }
                        }
                    }
                }
                if !changed {
                    break;
                }
            }
            let mut v = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if inlet(x, y) && d[y * w + x].is_finite() {
                        v.push(d[y * w + x] / span);
                    }
                }
            }
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let (hs, ws) = ((h - 1) as f64, (w - 1) as f64);
        let means: Vec<f64> = [
            faces(&|_, y| y == h - 1, &|_, y| y == 0, hs),
            faces(&|_, y| y == 0, &|_, y| y == h - 1, hs),
            faces(&|x, _| x == w - 1, &|x, _| x == 0, ws),
            faces(&|x, _| x == 0, &|x, _| x == w - 1, ws),
        ]
        .into_iter()
        .flatten()
        .collect();
        means.iter().sum::<f64>() / means.len() as f64
    }

    #[test]
    fn l_shape_matches_relaxation_oracle() {
        // down from the top face, a right-angle turn along a corridor, then
        // down to the bottom face; opposite faces must connect to percolate
        let m = BinaryMask::from_fn(100, 100, |x, y| {
            ((10..20).contains(&x) && y < 60) || ((50..60).contains(&y) && (10..90).contains(&x)) || ((80..90).contains(&x) && y >= 50)
        });
        let t = tortuosity(&m).unwrap();
        let oracle = bellman_ford_tortuosity(&m);
        assert!((t / oracle - 1.0).abs() <= 0.02, "{t} vs {oracle}");
    }

    #[test]
    fn stats_bundle() {
        let m = BinaryMask::from_fn(64, 64, |x, _| (20..30).contains(&x));
        let s = analyze(&m, 2.0).unwrap();
        assert!((s.porosity - 10.0 / 64.0).abs() < 1e-12);
        assert!((s.avg_pore_radius - 10.0).abs() <= 1.0);
        assert!(s.tortuosity.unwrap() >= 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn metrics_invariant_under_dihedral_maps(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let centres: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| (rng.random_range(0.0..48.0), rng.random_range(0.0..40.0), rng.random_range(3.0..9.0)))
                .collect();
            let m = BinaryMask::from_fn(48, 40, |x, y| {
                centres.iter().any(|&(cx, cy, r)| (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r * r)
            });
            prop_assume!(m.pore_count() > 0);
            let base = analyze(&m, 1.0).unwrap();
            for t in Geometric::ALL {
                let s = analyze(&m.transform(t), 1.0).unwrap();
                prop_assert_eq!(s.porosity, base.porosity);
                prop_assert!((s.specific_surface_area / base.specific_surface_area - 1.0).abs() <= 0.01);
                match (s.tortuosity, base.tortuosity) {
                    (Some(a), Some(b)) => prop_assert!((a / b - 1.0).abs() <= 0.01),
                    (None, None) => {}
                    other => prop_assert!(false, "percolation changed: {:?}", other),
                }
            }
        }

        #[test]
        fn tortuosity_at_least_one(bits in proptest::collection::vec(prop::bool::weighted(0.7), 20 * 20)) {
            let m = BinaryMask::from_fn(20, 20, |x, y| bits[y * 20 + x]);
            if let Ok(t) = tortuosity(&m) {
                prop_assert!(t >= 1.0);
            }
        }

        #[test]
        fn lengths_scale_with_pixel_size(bits in proptest::collection::vec(prop::bool::weighted(0.5), 16 * 16), ps in 0.1f64..10.0) {
            let m = BinaryMask::from_fn(16, 16, |x, y| bits[y * 16 + x]);
            prop_assume!(m.pore_count() > 0);
            let a = analyze(&m, 1.0).unwrap();
            let b = analyze(&m, ps).unwrap();
            prop_assert!((b.avg_pore_radius - ps * a.avg_pore_radius).abs() < 1e-9);
            prop_assert!((b.weighted_throat_radius - ps * a.weighted_throat_radius).abs() < 1e-9);
            prop_assert!((b.specific_surface_area * ps - a.specific_surface_area).abs() < 1e-9);
            prop_assert_eq!(a.tortuosity, b.tortuosity);
        }
    }
}
