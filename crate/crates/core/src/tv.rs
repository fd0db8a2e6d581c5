//! Smoothed total variation, spatial (isotropic, forward differences with a
//! zero difference past the last voxel) and temporal (cyclic over phases).

use crate::volume::Volume3;

pub const TV_EPS: f64 = 1e-8;

fn forward_diffs(v: &[f64], dims: [usize; 3], x: usize, y: usize, z: usize, i: usize) -> [f64; 3] {
    let [nx, ny, nz] = dims;
    let gx = if x + 1 < nx { v[i + 1] - v[i] } else { 0.0 };
    let gy = if y + 1 < ny { v[i + nx] - v[i] } else { 0.0 };
    let gz = if z + 1 < nz { v[i + nx * ny] - v[i] } else { 0.0 };
    [gx, gy, gz]
}

/// `sum_x sqrt(|grad V(x)|^2 + eps)`
pub fn tv_value(vol: &Volume3, eps: f64) -> f64 {
    let dims = vol.dims();
    let v = vol.data();
    let mut acc = 0.0;
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let [gx, gy, gz] = forward_diffs(v, dims, x, y, z, i);
                acc += (gx * gx + gy * gy + gz * gz + eps).sqrt();
                i += 1;
            }
        }
    }
    acc
}

/// Gradient of [`tv_value`] with respect to every voxel.
pub fn tv_gradient(vol: &Volume3, eps: f64) -> Volume3 {
    let dims = vol.dims();
    let [nx, ny, _] = dims;
    let v = vol.data();
    let mut out = Volume3::zeros(*vol.grid());
    let g = out.data_mut();
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let [gx, gy, gz] = forward_diffs(v, dims, x, y, z, i);
                let n = (gx * gx + gy * gy + gz * gz + eps).sqrt();
                let (ax, ay, az) = (gx / n, gy / n, gz / n);
                if x + 1 < nx {
                    g[i + 1] += ax;
                    g[i] -= ax;
                }
                if y + 1 < ny {
                    g[i + nx] += ay;
                    g[i] -= ay;
                }
                if z + 1 < dims[2] {
                    g[i + nx * ny] += az;
                    g[i] -= az;
                }
                i += 1;
            }
        }
    }
    out
}

/// In place `V <- V - weight * grad TV(V)`.
pub fn tv_step(vol: &mut Volume3, weight: f64, eps: f64) {
    if weight == 0.0 {
        return;
    }
    let g = tv_gradient(vol, eps);
    for (v, d) in vol.data_mut().iter_mut().zip(g.data()) {
        *v -= weight * d;
    }
}

/// `sum_i sum_x sqrt((V_{i+1 mod N}(x) - V_i(x))^2 + eps)`
pub fn ttv_value(phases: &[Volume3], eps: f64) -> f64 {
    let n = phases.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = phases[i].data();
        let b = phases[(i + 1) % n].data();
        for (x, y) in a.iter().zip(b) {
            let d = y - x;
            acc += (d * d + eps).sqrt();
        }
    }
    acc
}

pub fn ttv_gradient(phases: &[Volume3], eps: f64) -> Vec<Volume3> {
    let n = phases.len();
    let mut out: Vec<Volume3> = phases.iter().map(|p| Volume3::zeros(*p.grid())).collect();
    if n < 2 {
        return out;
    }
    for i in 0..n {
        let j = (i + 1) % n;
        let len = phases[i].data().len();
        for x in 0..len {
            let d = phases[j].data()[x] - phases[i].data()[x];
            let t = d / (d * d + eps).sqrt();
            out[j].data_mut()[x] += t;
            out[i].data_mut()[x] -= t;
        }
    }
    out
}

/// Joint gradient step on the cyclic temporal TV.
pub fn ttv_step(phases: &mut [Volume3], weight: f64, eps: f64) {
    if weight == 0.0 || phases.len() < 2 {
        return;
    }
    let g = ttv_gradient(phases, eps);
    for (p, d) in phases.iter_mut().zip(&g) {
        for (v, dv) in p.data_mut().iter_mut().zip(d.data()) {
            *v -= weight * dv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, dims: [usize; 3]) -> Volume3 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = Grid3::centered(dims, [1.0; 3]).unwrap();
        Volume3::from_fn(grid, |_, _, _| rng.random_range(0.0..1.0))
    }

    fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        analytic
            .iter()
            .zip(fd)
            .map(|(a, f)| (a - f).abs() / scale)
            .fold(0.0, f64::max)
    }

    #[test]
    fn tv_gradient_matches_central_differences() {
        for seed in 0..3 {
            let v = random(seed, [8, 8, 8]);
            let g = tv_gradient(&v, TV_EPS);
            let h = 1e-6;
            let mut fd = Vec::new();
            let mut an = Vec::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..40 {
                let i = rng.random_range(0..v.data().len());
                let mut p = v.clone();
                p.data_mut()[i] += h;
                let mut m = v.clone();
                m.data_mut()[i] -= h;
                fd.push((tv_value(&p, TV_EPS) - tv_value(&m, TV_EPS)) / (2.0 * h));
                an.push(g.data()[i]);
            }
            let err = max_rel_err(&an, &fd);
            assert!(err < 1e-4, "relative error {err}");
        }
    }

    #[test]
    fn ttv_gradient_matches_central_differences() {
        let phases: Vec<Volume3> = (0..3).map(|s| random(s + 10, [4, 4, 4])).collect();
        let g = ttv_gradient(&phases, TV_EPS);
        let h = 1e-6;
        let mut an = Vec::new();
        let mut fd = Vec::new();
        for ph in 0..3 {
            for i in [0, 13, 40, 63] {
                let mut p = phases.clone();
                p[ph].data_mut()[i] += h;
                let mut m = phases.clone();
                m[ph].data_mut()[i] -= h;
                fd.push((ttv_value(&p, TV_EPS) - ttv_value(&m, TV_EPS)) / (2.0 * h));
                an.push(g[ph].data()[i]);
            }
        }
        assert!(max_rel_err(&an, &fd) < 1e-4);
    }

    #[test]
    fn constant_volume_has_zero_gradient() {
        let grid = Grid3::centered([5, 5, 5], [1.0; 3]).unwrap();
        let v = Volume3::filled(grid, 0.3);
        assert!(tv_gradient(&v, TV_EPS).data().iter().all(|&g| g == 0.0));
        let single = vec![v.clone()];
        assert!(ttv_gradient(&single, TV_EPS)[0].data().iter().all(|&g| g == 0.0));
        let mut s = single.clone();
        ttv_step(&mut s, 1.0, TV_EPS);
        assert_eq!(s[0], v);
    }
}
