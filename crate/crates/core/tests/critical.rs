use gravalloc::critical::{find_local_maxima, MaximaOptions};
use gravalloc::field::potential;
use gravalloc::geometry::fibonacci_points;
use gravalloc::process::sample_uniform;
use gravalloc::{Configuration, Rotation, Seed, SphereParams, SpherePoint};
use nalgebra::Vector3;

fn tangent_basis(x: &SpherePoint) -> (Vector3<f64>, Vector3<f64>) {
    let up = x.coords().normalize();
    let axis = if up.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
    let e1 = (axis - up * up.dot(&axis)).normalize();
    (e1, up.cross(&e1))
}

/// Derivative-free refinement: compass search on the sphere with a
/// shrinking step.
fn refine(mut x: SpherePoint, cfg: &Configuration, mut step: f64, tol: f64) -> SpherePoint {
    let p = *cfg.params();
    let mut u = potential(&x, cfg).unwrap();
    while step > tol {
        let (e1, e2) = tangent_basis(&x);
        let mut moved = false;
        for k in 0..8 {
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            let y = x.geodesic_step(&(e1 * a.cos() + e2 * a.sin()), step, &p);
            let v = potential(&y, cfg).unwrap();
            if v > u {
                x = y;
                u = v;
                moved = true;
                break;
            }
        }
        if !moved {
            step *= 0.5;
        }
    }
    x
}

#[test]
fn two_source_maxima_match_grid_search() {
    let p = SphereParams::new(2).unwrap();
    let r = p.radius();
    for (k, sep) in [0.2, 0.6, 0.95].map(|f| f * 2.0 * r).into_iter().enumerate() {
        let half = (sep / (2.0 * r)).asin();
        let a = p.point_at(0.4 + k as f64, half - 0.2);
        let dir = Vector3::new(0.0, 0.0, 1.0);
        let b = a.geodesic_step(&dir, 2.0 * half * r, &p);
        let cfg = Configuration::new(vec![a, b]).unwrap();

        let grid = fibonacci_points(&p, 1_000_000);
        let u: Vec<f64> = grid.iter().map(|x| potential(x, &cfg).unwrap()).collect();
        let spacing = (p.area() / grid.len() as f64).sqrt();
        let best = (0..grid.len()).max_by(|&i, &j| u[i].total_cmp(&u[j])).unwrap();
        let oracle = refine(grid[best], &cfg, spacing, 1e-9 * r);

        let s = find_local_maxima(&cfg, &MaximaOptions::default()).unwrap();
        let maxima: Vec<_> = s.maxima().collect();
        assert_eq!(maxima.len(), 1, "separation {sep}");
        assert!(maxima[0].location.chordal_distance(&oracle) < 1e-5 * r);
    }
}

#[test]
fn maxima_are_rotation_equivariant() {
    let cfg = sample_uniform(48, Seed(77)).unwrap();
    let rot = Rotation::from_quaternion([0.2, -0.9, 0.4, 0.1]);
    let rcfg = cfg.rotated(&rot).unwrap();
    let opts = MaximaOptions::default();
    let a = find_local_maxima(&cfg, &opts).unwrap();
    let b = find_local_maxima(&rcfg, &opts).unwrap();
    assert_eq!(a.count(), b.count());
    let r = cfg.params().radius();
    for m in a.maxima() {
        let image = rot.apply(&m.location);
        let nearest = b.maxima().map(|q| q.location.chordal_distance(&image)).fold(f64::INFINITY, f64::min);
        assert!(nearest < 1e-6 * r, "{nearest}");
    }
}

#[test]
fn reported_maxima_are_certified() {
    let cfg = sample_uniform(96, Seed(3)).unwrap();
    let opts = MaximaOptions::default();
    let s = find_local_maxima(&cfg, &opts).unwrap();
    assert!(s.count() > 0);
    for m in s.maxima() {
        assert!(m.probe_passed);
        assert!(m.gradient_norm <= opts.grad_tol);
        assert!(m.hessian_eigs[1] < -opts.eig_margin);
        // Probe independently in 16 directions at twice the certificate radius.
        let u = potential(&m.location, &cfg).unwrap();
        let (e1, e2) = tangent_basis(&m.location);
        for k in 0..16 {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            let y = m.location.geodesic_step(&(e1 * a.cos() + e2 * a.sin()), 2e-4 * cfg.params().radius(), cfg.params());
            assert!(potential(&y, &cfg).unwrap() < u);
        }
    }
}
