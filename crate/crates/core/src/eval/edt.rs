//! Exact Euclidean distance transform (Felzenszwalb and Huttenlocher).

use crate::types::Bitmask;

/// Squared distance to the nearest finite entry of `f` along one line.
fn transform_line(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    // lower envelope of the parabolas rooted at the finite entries
    let mut k: Option<usize> = None;
    for q in 0..f.len() {
        if f[q].is_infinite() {
            continue;
        }
        let Some(mut j) = k else {
            k = Some(0);
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            continue;
        };
        let s = loop {
            let p = v[j];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[j] {
                j -= 1;
            } else {
                break s;
            }
        };
        j += 1;
        v[j] = q;
        z[j] = s;
        z[j + 1] = f64::INFINITY;
        k = Some(j);
    }
    if k.is_none() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut j = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[j + 1] < q as f64 {
            j += 1;
        }
        let d = q as f64 - v[j] as f64;
        *o = d * d + f[v[j]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` site;
/// infinity everywhere when there is no site.
pub fn squared_distance_transform(sites: &[bool], width: usize, height: usize) -> Vec<f64> {
    assert_eq!(sites.len(), width * height);
    let n = width.max(height);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0; n + 1]);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut grid: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        transform_line(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        let row = &mut grid[y * width..(y + 1) * width];
        f[..width].copy_from_slice(row);
        transform_line(&f[..width], &mut out[..width], &mut v, &mut z);
        row.copy_from_slice(&out[..width]);
    }
    grid
}

/// Mask pixels with at least one 4-neighbor outside the mask or the image.
pub fn boundary_pixels(mask: &Bitmask) -> Vec<bool> {
    let (w, h) = mask.extent();
    let inside = |x: i64, y: i64| x >= 0 && y >= 0 && x < w as i64 && y < h as i64 && mask.get(x as u32, y as u32);
    let mut out = vec![false; (w * h) as usize];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if inside(x, y) {
                out[(y * w as i64 + x) as usize] =
                    !(inside(x - 1, y) && inside(x + 1, y) && inside(x, y - 1) && inside(x, y + 1));
            }
        }
    }
    out
}

/// Distance map to the mask boundary.
#[derive(Clone, Debug)]
pub struct BoundaryDistance {
    width: u32,
    squared: Vec<f64>,
}

impl BoundaryDistance {
    /// `None` for an empty mask.
    pub fn new(mask: &Bitmask) -> Option<Self> {
        if mask.count() == 0 {
            return None;
        }
        let (w, h) = mask.extent();
        Some(Self {
            width: w,
            squared: squared_distance_transform(&boundary_pixels(mask), w as usize, h as usize),
        })
    }

    pub fn at(&self, x: u32, y: u32) -> f64 {
        self.squared[(y * self.width + x) as usize].sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(sites: &[bool], w: usize, h: usize) -> Vec<f64> {
        let s: Vec<(usize, usize)> = (0..w * h).filter(|&i| sites[i]).map(|i| (i % w, i / w)).collect();
        (0..w * h)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                s.iter()
                    .map(|&(a, b)| (a as f64 - x as f64).powi(2) + (b as f64 - y as f64).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn matches_brute_force_on_random_sites() {
        use rand::Rng;
        let mut rng = crate::rng::stream(1, "edt", &[]);
        for trial in 0..300 {
            let (w, h) = (rng.random_range(1..20), rng.random_range(1..20));
            let density = [0.0, 0.02, 0.1, 0.5][trial % 4];
            let sites: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
            assert_eq!(squared_distance_transform(&sites, w, h), brute(&sites, w, h));
        }
    }

    #[test]
    fn solid_square_center() {
        let mut m = Bitmask::new(9, 9);
        for y in 2..7 {
            for x in 2..7 {
                m.set(x, y, true);
            }
        }
        let d = BoundaryDistance::new(&m).unwrap();
        assert_eq!(d.at(4, 4), 2.0);
        assert_eq!(d.at(2, 3), 0.0);
        assert_eq!(d.at(1, 4), 1.0);
        assert!(BoundaryDistance::new(&Bitmask::new(4, 4)).is_none());
    }
}
