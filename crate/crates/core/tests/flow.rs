use gravalloc::flow::{allocate_all, allocate_many, FlowOptions, Target};
use gravalloc::process::{sample_uniform, uniform_points};
use gravalloc::{Seed, SphereParams};

#[test]
fn capture_radius_does_not_change_targets() {
    let cfg = sample_uniform(16, Seed(41)).unwrap();
    let xs = uniform_points(cfg.params(), 10_000, Seed(42));
    let targets: Vec<Vec<Target>> = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&d| {
            let opts = FlowOptions { capture_radius: d, ..FlowOptions::default() };
            allocate_all(&xs, &cfg, &opts).unwrap().into_iter().map(|o| o.target).collect()
        })
        .collect();
    for pair in targets.windows(2) {
        let agree = pair[0].iter().zip(&pair[1]).filter(|(a, b)| a == b).count();
        assert!(agree as f64 >= 0.999 * xs.len() as f64, "{agree}");
    }
}

#[test]
fn single_source_mean_distance_matches_quadrature() {
    // With one source every start is captured by it, so the allocation
    // distance is the chordal distance |x − z|.
    let p = SphereParams::new(1).unwrap();
    let r = p.radius();
    let cfg = sample_uniform(1, Seed(7)).unwrap();
    let z = cfg.sources()[0];
    let xs = uniform_points(&p, 10_000, Seed(8));
    let out = allocate_all(&xs, &cfg, &FlowOptions::default()).unwrap();
    let d: Vec<f64> = xs
        .iter()
        .zip(&out)
        .map(|(x, o)| {
            assert_eq!(o.target, Target::Source(0));
            x.chordal_distance(&z)
        })
        .collect();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();

    // Midpoint rule over the polar angle α from z, with density sin α / 2.
    let m = 100_000;
    let h = std::f64::consts::PI / m as f64;
    let quad: f64 = (0..m)
        .map(|k| {
            let a = (k as f64 + 0.5) * h;
            2.0 * r * (a / 2.0).sin() * a.sin() / 2.0 * h
        })
        .sum();
    assert!((quad - 4.0 * r / 3.0).abs() < 1e-9);
    assert!((mean - quad).abs() < 4.0 * sd / (d.len() as f64).sqrt(), "{mean} vs {quad}");
}

#[test]
fn batch_results_do_not_depend_on_thread_count() {
    let cfg = sample_uniform(40, Seed(5)).unwrap();
    let xs = uniform_points(cfg.params(), 300, Seed(6));
    let opts = FlowOptions::default();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| allocate_many(&xs, &cfg, &opts))
            .into_iter()
            .map(|r| r.unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(1), run(4));
}
