use partgrasp::geometry::Capsule;
use partgrasp::hand::{hand_surface, GraspVector, HandSurface, HandTemplate};
use partgrasp::linalg::Vec3;
use partgrasp::metrics::*;
use partgrasp::objects::{generate_object, generate_object_with, Primitive, Shape, Solid, CATEGORIES};
use partgrasp::synth::{default_finger_vector, generate_grasp, template_text, GraspGenConfig};
use partgrasp::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sphere_points(r: f64, n: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let rho = (1.0 - z * z).sqrt();
            let a = golden * i as f64;
            Vec3::new(r * rho * a.cos(), r * rho * a.sin(), r * z)
        })
        .collect()
}

fn sphere_solid(r: f64) -> Solid {
    Solid {
        primitives: vec![Primitive {
            part: 0,
            shape: Shape::Sphere {
                center: Vec3::zero(),
                radius: r,
            },
        }],
    }
}

fn lone_vertex(p: Vec3) -> HandSurface {
    let mut s = HandSurface::from_capsules(&[]);
    s.vertices.push(p);
    s.vertex_finger.push(1);
    s.vertex_distal.push(true);
    s.vertex_capsule.push(0);
    s
}

#[test]
fn penetration_depth_fixtures() {
    let pts = sphere_points(3.0, 20_000);
    let solid = sphere_solid(3.0);
    let far = lone_vertex(Vec3::new(0.0, 0.0, 10.0));
    assert_eq!(penetration_depth(&pts, Some(&solid), &far).unwrap().depth, 0.0);
    for d in [0.2, 0.7, 1.5] {
        let s = lone_vertex(Vec3::new(0.3, -0.2, 3.0 - d).normalized().scale(3.0 - d));
        let p = penetration_depth(&pts, Some(&solid), &s).unwrap();
        assert!((p.depth - d).abs() < 0.05, "{d}: {}", p.depth);
        assert!(!p.heuristic);
        assert_eq!(p, penetration_depth(&pts, Some(&solid), &s).unwrap());
        let h = penetration_depth(&pts, None, &s).unwrap();
        assert!(h.heuristic);
        assert!((h.depth - d).abs() < 0.05);
    }
}

#[test]
fn intersection_volume_fixtures() {
    let cube = Solid {
        primitives: vec![Primitive {
            part: 0,
            shape: Shape::Cuboid {
                center: Vec3::new(0.3, 0.1, -0.2),
                axes: [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)],
                half_extents: [0.5; 3],
            },
        }],
    };
    let big = Capsule::new(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(1.5, 0.0, 0.0), 2.0).unwrap();
    let v = intersection_volume(&cube, &HandSurface::from_capsules(&[big]), 0.1).unwrap();
    assert!((v - 1.0).abs() <= 0.1, "{v}");
    let away = Capsule::new(Vec3::new(10.0, 0.0, 0.0), Vec3::new(12.0, 0.0, 0.0), 1.0).unwrap();
    assert_eq!(intersection_volume(&cube, &HandSurface::from_capsules(&[away]), 0.1).unwrap(), 0.0);
    assert!(intersection_volume(&cube, &HandSurface::from_capsules(&[big]), 0.0).is_err());
}

fn pushed_in_grasps(n: usize) -> Vec<(partgrasp::objects::PartLabeledObject, GraspVector)> {
    let t = HandTemplate::default();
    (0..n)
        .map(|k| {
            let obj = generate_object(CATEGORIES[k % 6], 40 + k as u64).unwrap();
            let part = (k % 2) as u32;
            let fv = default_finger_vector(&obj, part).unwrap();
            let mut seed = k as u64;
            let mut g = loop {
                if let Ok(g) = generate_grasp(&obj, part, fv, seed, &t, &GraspGenConfig::default()) {
                    break g;
                }
                seed += 977;
            };
            let o = g.offset();
            g.set_offset(o.scale(0.85));
            (obj, g)
        })
        .collect()
}

#[test]
fn voxel_volume_converges_and_tracks_depth() {
    let t = HandTemplate::default();
    let scenes = pushed_in_grasps(12);
    let (mut coarse, mut fine) = (0.0, 0.0);
    for (obj, g) in &scenes {
        let s = hand_surface(g, obj.centroid, &t);
        coarse += intersection_volume(&obj.solid, &s, 0.2).unwrap();
        fine += intersection_volume(&obj.solid, &s, 0.1).unwrap();
    }
    assert!(coarse > 0.0);
    assert!((coarse - fine).abs() / fine < 0.05, "{coarse} vs {fine}");

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let voxel = 0.2;
    for k in 0..50 {
        let obj = generate_object_with(CATEGORIES[k % 6], k as u64, 1024).unwrap();
        let mut g = GraspVector::default();
        for v in g.pose_mut().iter_mut() {
            *v = rng.random_range(-0.6..0.6);
        }
        g.set_offset(Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0)));
        let s = hand_surface(&g, obj.centroid, &t);
        let depth = penetration_depth(&obj.cloud.points, Some(&obj.solid), &s).unwrap().depth;
        let vol = intersection_volume(&obj.solid, &s, voxel).unwrap();
        if depth > voxel {
            assert!(vol > 0.0, "scene {k}: depth {depth} but no volume");
        }
        if vol == 0.0 {
            assert!(depth <= voxel, "scene {k}");
        }
    }
}

#[test]
fn free_fall_matches_the_closed_form() {
    let pts = sphere_points(2.0, 200);
    let none = HandSurface::from_capsules(&[]);
    let cfg = SimConfig::default();
    let d = simulate_displacement(&pts, &none, &cfg).unwrap();
    assert!((d - 490.0).abs() <= 0.01 * 490.0, "{d}");
    let coarse = simulate_displacement(&pts, &none, &SimConfig { dt: 2.0 / 240.0, ..cfg.clone() }).unwrap();
    assert!((coarse - d).abs() / d < 0.02);
    let half = simulate_displacement(&pts, &none, &SimConfig { horizon: 0.5, ..cfg.clone() }).unwrap();
    assert!(half < d);
    assert_eq!(d, simulate_displacement(&pts, &none, &cfg).unwrap());
    let violent = SimConfig {
        gravity: 1e8,
        ..cfg
    };
    assert!(matches!(simulate_displacement(&pts, &none, &violent), Err(Error::Unstable { .. })));
}

#[test]
fn enveloping_cage_holds_the_object() {
    let pts = sphere_points(1.0, 400);
    let mut caps = Vec::new();
    let gap = 1.52;
    for axis in 0..3 {
        for sign in [-1.0, 1.0] {
            let mut c = [0.0; 3];
            c[axis] = sign * gap;
            let mut d = [0.0; 3];
            d[(axis + 1) % 3] = 1.5;
            let (c, d) = (Vec3::from_array(c), Vec3::from_array(d));
            caps.push(Capsule::new(c - d, c + d, 0.55).unwrap());
            let mut e = [0.0; 3];
            e[(axis + 2) % 3] = 1.5;
            let e = Vec3::from_array(e);
            caps.push(Capsule::new(c - e, c + e, 0.55).unwrap());
        }
    }
    let cage = HandSurface::from_capsules(&caps);
    let d = simulate_displacement(&pts, &cage, &SimConfig::default()).unwrap();
    assert!(d < 0.5, "{d}");
}

#[test]
fn diversity_fixtures() {
    let uniform: Vec<usize> = (0..100).map(|i| i % 20).collect();
    assert!((assignment_entropy(&uniform, 20) - 20f64.ln()).abs() < 1e-9);

    let same = vec![vec![1.0, 2.0, 3.0]; 20];
    let d = diversity(&same, 20, 5, 0).unwrap();
    assert_eq!(d.entropy, 0.0);
    assert_eq!(d.mean_cluster_size, 0.0);

    let spread: Vec<Vec<f64>> = (0..20).map(|i| vec![100.0 * i as f64, 0.0]).collect();
    let d = diversity(&spread, 20, 50, 0).unwrap();
    assert!((d.entropy - 20f64.ln()).abs() < 1e-9);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let blobs: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            let c = if i < 20 { 0.0 } else { 50.0 };
            vec![c + rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)]
        })
        .collect();
    let d = diversity(&blobs, 2, 50, 0).unwrap();
    assert!((d.entropy - 2f64.ln()).abs() < 1e-12);
    assert!(diversity(&blobs[..5], 20, 3, 0).unwrap().reduced);
}

fn sse(data: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for j in 0..k {
        let members: Vec<&Vec<f64>> = data.iter().zip(labels).filter(|(_, l)| **l == j).map(|(x, _)| x).collect();
        if members.is_empty() {
            continue;
        }
        let dim = members[0].len();
        let mean: Vec<f64> = (0..dim).map(|c| members.iter().map(|m| m[c]).sum::<f64>() / members.len() as f64).collect();
        total += members.iter().map(|m| m.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    total
}

#[test]
fn kmeans_reaches_the_exhaustive_optimum_on_small_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..10 {
        let data: Vec<Vec<f64>> = (0..10).map(|_| vec![rng.random_range(0.0..5.0), rng.random_range(0.0..5.0)]).collect();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << 10) {
            let labels: Vec<usize> = (0..10).map(|i| ((mask >> i) & 1) as usize).collect();
            best = best.min(sse(&data, &labels, 2));
        }
        let (labels, _, inertia) = kmeans(&data, 2, 50, trial);
        assert!((inertia - best).abs() < 1e-9, "trial {trial}: {inertia} vs {best}");
        assert!((sse(&data, &labels, 2) - best).abs() < 1e-9);
    }
}

#[test]
fn part_accuracy_fixtures() {
    let t = HandTemplate::default();
    let mut objects = Vec::new();
    let mut grasps = Vec::new();
    let mut truth = Vec::new();
    let mut wrong = Vec::new();
    for k in 0..10 {
        let obj = generate_object(CATEGORIES[k % 6], 70 + k as u64).unwrap();
        let part = (k / 6) as u32 % 2;
        let fv = default_finger_vector(&obj, part).unwrap();
        let mut seed = k as u64;
        let g = loop {
            if let Ok(g) = generate_grasp(&obj, part, fv, seed, &t, &GraspGenConfig::default()) {
                break g;
            }
            seed += 31;
        };
        truth.push(template_text(&obj.category, &obj.part_names[part as usize]));
        wrong.push(template_text(&obj.category, &obj.part_names[1 - part as usize]));
        objects.push(obj);
        grasps.push(g);
    }
    let items = |texts: &Vec<String>| -> Vec<(usize, String)> { texts.iter().cloned().enumerate().collect() };
    let run = |texts: &[(usize, String)]| {
        let it: Vec<EvalItem> = texts
            .iter()
            .map(|(i, s)| EvalItem {
                grasp: &grasps[*i],
                object: &objects[*i],
                text: s,
            })
            .collect();
        part_accuracy(&it, &t)
    };
    assert_eq!(run(&items(&truth)).percent, 100.0);
    assert_eq!(run(&items(&wrong)).percent, 0.0);
    let mixed: Vec<String> = (0..10).map(|i| if i < 7 { truth[i].clone() } else { wrong[i].clone() }).collect();
    assert_eq!(run(&items(&mixed)).percent, 70.0);
    let mut bad = items(&truth);
    bad[0].1 = "hold it".into();
    let r = run(&bad);
    assert_eq!(r.percent, 90.0);
    assert_eq!(r.unresolvable, vec![0]);
}

#[test]
fn report_round_trips_and_is_deterministic() {
    let t = HandTemplate::default();
    let scenes = pushed_in_grasps(4);
    let texts: Vec<String> = scenes
        .iter()
        .enumerate()
        .map(|(k, (o, _))| template_text(&o.category, &o.part_names[k % 2]))
        .collect();
    let items: Vec<EvalItem> = scenes
        .iter()
        .zip(&texts)
        .map(|((o, g), s)| EvalItem {
            grasp: g,
            object: o,
            text: s,
        })
        .collect();
    let cfg = MetricConfig {
        restarts: 5,
        ..MetricConfig::default()
    };
    let a = evaluate(&items, &cfg, &t).unwrap();
    let b = evaluate(&items, &cfg, &t).unwrap();
    assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
    assert_eq!(MetricsReport::from_json(&a.to_json().unwrap()).unwrap(), a);
    assert!(a.clusters_reduced);
    assert!(a.diversity_entropy >= 0.0 && a.diversity_entropy <= 20f64.ln());
    assert!((0.0..=100.0).contains(&a.part_accuracy_percent));
    assert!(a.penetration_depth_cm >= 0.0 && a.intersection_volume_cm3 >= 0.0);
    let csv = a.to_csv();
    assert!(csv.starts_with("# t2g-metrics/1\nmetric,value\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 4);
    let bad = a.to_json().unwrap().replace("t2g-metrics/1", "t2g-metrics/0");
    assert!(matches!(MetricsReport::from_json(&bad), Err(Error::VersionMismatch { .. })));
}
