use sarseg_core::datagen::{derive_water_mask, generate_scene, Raster, SceneSpec, IGNORE};

fn components(labels: &[u8], h: usize, w: usize, class: u8) -> Vec<Vec<usize>> {
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels[start] != class {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            comp.push(p);
            let (y, x) = ((p / w) as isize, (p % w) as isize);
            for (dy, dx) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if !seen[q] && labels[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

/// A component is at most 3 px wide when no 4×4 block fits inside it.
fn max_width_le_3(comp: &[usize], w: usize) -> bool {
    let set: std::collections::HashSet<usize> = comp.iter().copied().collect();
    !comp.iter().any(|&p| {
        let (y, x) = (p / w, p % w);
        (0..4).all(|dy| (0..4).all(|dx| x + dx < w && set.contains(&((y + dy) * w + x + dx))))
    })
}

#[test]
fn thin_structures_are_separate_thin_components() {
    for seed in 0..3 {
        let mut spec = SceneSpec::long_tailed(256, 256, seed);
        spec.thin_structure_count = 3;
        // Thin structures only: the class gets no Voronoi cells.
        spec.thin_structure_class = 13;
        spec.class_target_freq[13] = 0.0;
        spec.class_target_freq[4] += 0.01;
        let r = generate_scene(&spec).unwrap();
        let comps = components(&r.labels, r.height, r.width, 13);
        let thin = comps.iter().filter(|c| max_width_le_3(c, r.width)).count();
        assert!(thin >= 3, "seed {seed}: {thin} thin components of {}", comps.len());
    }
}

#[test]
fn large_look_count_concentrates_amplitude() {
    let spec = SceneSpec {
        height: 128,
        width: 128,
        num_classes: 2,
        class_mean_power: vec![1.0, 1.0],
        class_target_freq: vec![0.5, 0.5],
        speckle_looks: 4096,
        thin_structure_count: 0,
        thin_structure_class: 0,
        cell_size: 16,
        tag: String::new(),
        seed: 11,
    };
    let r = generate_scene(&spec).unwrap();
    let mse: f64 = r.amplitude.iter().map(|&a| (a as f64 - 1.0).powi(2)).sum::<f64>() / r.len() as f64;
    assert!(mse.sqrt() < 0.05, "rms deviation {}", mse.sqrt());
}

#[test]
fn realized_histogram_tracks_targets() {
    for seed in [1, 2] {
        let spec = SceneSpec::long_tailed(512, 512, seed);
        let r = generate_scene(&spec).unwrap();
        let mut counts = [0usize; 14];
        for &l in &r.labels {
            counts[l as usize] += 1;
        }
        for (k, &f) in spec.class_target_freq.iter().enumerate() {
            let realized = counts[k] as f64 / r.len() as f64;
            assert!((realized - f).abs() <= 0.2 * f, "seed {seed} class {k}: {realized} vs {f}");
        }
    }
}

#[test]
fn single_look_power_moment() {
    // One region per class: L=1 makes intensity exponential, so mean
    // amplitude² recovers the class power.
    let spec = SceneSpec {
        height: 512,
        width: 512,
        num_classes: 2,
        class_mean_power: vec![0.05, 2.0],
        class_target_freq: vec![0.5, 0.5],
        speckle_looks: 1,
        thin_structure_count: 0,
        thin_structure_class: 0,
        cell_size: 16,
        tag: String::new(),
        seed: 5,
    };
    let r = generate_scene(&spec).unwrap();
    for k in 0..2u8 {
        let (mut s, mut n) = (0.0f64, 0usize);
        for (a, &l) in r.amplitude.iter().zip(&r.labels) {
            if l == k {
                s += (*a as f64).powi(2);
                n += 1;
            }
        }
        let m = s / n as f64;
        let p = spec.class_mean_power[k as usize];
        assert!((m - p).abs() <= 0.1 * p, "class {k}: {m} vs {p}");
    }
}

#[test]
fn water_mask_idempotent_on_scene() {
    let mut r = generate_scene(&SceneSpec::long_tailed(64, 64, 9)).unwrap();
    r.labels[0] = IGNORE;
    let m = derive_water_mask(&r, 0);
    assert_eq!(m.labels[0], IGNORE);
    assert_eq!(derive_water_mask(&m, 1), m);
    for (a, b) in r.labels.iter().zip(&m.labels) {
        match *a {
            IGNORE => assert_eq!(*b, IGNORE),
            0 => assert_eq!(*b, 1),
            _ => assert_eq!(*b, 0),
        }
    }
}

#[test]
fn raster_rejects_bad_amplitudes() {
    assert!(Raster::new(1, 2, vec![1.0, f32::NAN], vec![0, 0], String::new()).is_err());
    assert!(Raster::new(1, 2, vec![1.0, -1.0], vec![0, 0], String::new()).is_err());
    assert!(Raster::new(1, 2, vec![1.0], vec![0, 0], String::new()).is_err());
}
