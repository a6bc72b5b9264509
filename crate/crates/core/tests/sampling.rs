use std::collections::BTreeMap;

use proptest::prelude::*;
use sarseg_core::datagen::{generate_scene, Raster, SceneSpec, IGNORE};
use sarseg_core::sampling::*;

/// Upper 1% point of the chi-square distribution with one degree of freedom.
const CHI2_1DOF_99: f64 = 6.634897;

fn ninety_ten(h: usize, w: usize) -> Raster {
    let labels = (0..h * w).map(|p| if p % 10 == 0 { 1 } else { 0 }).collect();
    Raster::new(h, w, vec![1.0; h * w], labels, "sep".into()).unwrap()
}

#[test]
fn inverse_frequency_draws_balance_classes() {
    let r = ninety_ten(200, 200);
    let stats = compute_class_stats([r.labels.as_slice()], 2).unwrap();
    assert!((stats.frequencies[0] - 0.9).abs() < 1e-12);
    let n = 100_000;
    let draws = draw_anchor_pixels(std::slice::from_ref(&r), &stats, n, 42).unwrap();
    let mut observed = [0f64; 2];
    for (_, row, col) in draws {
        observed[r.labels[row * r.width + col] as usize] += 1.0;
    }
    let expected = n as f64 / 2.0;
    let chi2: f64 = observed.iter().map(|o| (o - expected).powi(2) / expected).sum();
    assert!(chi2 < CHI2_1DOF_99, "chi2 {chi2}, observed {observed:?}");
}

#[test]
fn anchors_are_valid_unique_and_deterministic() {
    let mut r = generate_scene(&SceneSpec::long_tailed(64, 64, 2)).unwrap();
    for p in 0..64 {
        r.labels[p] = IGNORE;
    }
    let stats = compute_class_stats([r.labels.as_slice()], 14).unwrap();
    let a = sample_anchors(std::slice::from_ref(&r), &stats, 500, 3).unwrap();
    let b = sample_anchors(std::slice::from_ref(&r), &stats, 500, 3).unwrap();
    assert_eq!(a, b);
    let set = &a[0].anchors;
    assert!(!set.is_empty() && set.len() <= 500);
    assert!(set.windows(2).all(|w| w[0] < w[1]));
    for &(row, col) in set {
        assert!(row < 64 && col < 64);
        assert_ne!(r.labels[row * 64 + col], IGNORE);
    }
    let one = sample_anchors(std::slice::from_ref(&r), &stats, 1, 9).unwrap();
    assert_eq!(one, sample_anchors(std::slice::from_ref(&r), &stats, 1, 9).unwrap());
    assert_eq!(one[0].anchors.len(), 1);
}

#[test]
fn uniform_frequencies_give_uniform_positions() {
    let labels: Vec<u8> = (0..100).map(|p| (p % 2) as u8).collect();
    let r = Raster::new(10, 10, vec![1.0; 100], labels, String::new()).unwrap();
    let stats = compute_class_stats([r.labels.as_slice()], 2).unwrap();
    let draws = draw_anchor_pixels(std::slice::from_ref(&r), &stats, 100_000, 1).unwrap();
    let mut hits = vec![0f64; 100];
    for (_, row, col) in draws {
        hits[row * 10 + col] += 1.0;
    }
    // 99 degrees of freedom; the 1% critical value is about 134.6.
    let chi2: f64 = hits.iter().map(|h| (h - 1000.0).powi(2) / 1000.0).sum();
    assert!(chi2 < 134.6, "chi2 {chi2}");
}

#[test]
fn stats_are_additive_across_rasters() {
    let a = generate_scene(&SceneSpec::long_tailed(32, 48, 1)).unwrap();
    let b = generate_scene(&SceneSpec::long_tailed(40, 16, 2)).unwrap();
    let sa = compute_class_stats([a.labels.as_slice()], 14).unwrap();
    let sb = compute_class_stats([b.labels.as_slice()], 14).unwrap();
    let both = compute_class_stats([a.labels.as_slice(), b.labels.as_slice()], 14).unwrap();
    let summed: Vec<u64> = sa.counts.iter().zip(&sb.counts).map(|(x, y)| x + y).collect();
    assert_eq!(both.counts, summed);
    assert!((both.frequencies.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let uniform = compute_class_stats([&[0u8; 9][..]], 1).unwrap();
    assert_eq!(uniform.frequencies, vec![1.0]);
}

#[test]
fn default_remap_pushes_histogram_forward() {
    let r = generate_scene(&SceneSpec::long_tailed(128, 128, 4)).unwrap();
    let table = RemapTable::default_14_to_9();
    let mut anchors = AnchorSet { raster: 0, anchors: vec![] };
    anchors.anchors.push((0, 0));
    let patch = extract_patches(&r, &anchors, 128).unwrap().remove(0);
    let before = compute_class_stats([patch.labels.as_slice()], 14).unwrap();
    let out = remap_labels(&patch, &table).unwrap();
    assert_eq!(out.image, patch.image);
    let after = compute_class_stats([out.labels.as_slice()], 9).unwrap();
    // Independent pushforward: the merge groups written out by hand.
    let groups: [&[usize]; 9] = [&[0], &[1], &[2, 3], &[4], &[5, 6, 7, 8, 10], &[9], &[11], &[12], &[13]];
    for (t, g) in groups.iter().enumerate() {
        let expected: u64 = g.iter().map(|&s| before.counts[s]).sum();
        assert_eq!(after.counts[t], expected, "target {t}");
    }
    let id = RemapTable::identity(14).unwrap();
    assert_eq!(remap_labels(&patch, &id).unwrap(), patch);
    let collapse = RemapTable::new([(0u8, 0u8), (1, 0)].into_iter().collect(), 1).unwrap();
    let ones = PatchPair::new(2, vec![0.0; 4], vec![1; 4], patch.origin, String::new()).unwrap();
    assert_eq!(remap_labels(&ones, &collapse).unwrap().labels, vec![0; 4]);
}

#[test]
fn split_routes_by_tag() {
    let mk = |tag: &str, i: usize| {
        PatchPair::new(1, vec![i as f32], vec![0], PatchOrigin { raster: i, row: 0, col: 0 }, tag.into()).unwrap()
    };
    let spec: BTreeMap<String, Split> =
        [("oct".into(), Split::Pretrain), ("nov".into(), Split::Pretrain), ("sep".into(), Split::Train)]
            .into_iter()
            .collect();
    let patches = vec![mk("oct", 0), mk("sep", 1), mk("nov", 2), mk("sep", 3)];
    let s = split_by_tag(patches, &spec).unwrap();
    assert_eq!(s.train.len(), 2);
    assert!(s.train.iter().all(|p| p.tag == "sep"));
    assert_eq!(s.pretrain.len(), 2);
    assert!(s.val.is_empty() && s.test.is_empty());
    assert_eq!(split_by_tag(vec![], &spec).unwrap(), SplitSets::default());
    assert!(matches!(split_by_tag(vec![mk("dec", 0)], &spec), Err(sarseg_core::Error::Config(_))));
}

#[test]
fn normalized_training_set_is_standard() {
    let r = generate_scene(&SceneSpec::long_tailed(128, 128, 6)).unwrap();
    let all = AnchorSet { raster: 0, anchors: vec![(0, 0), (0, 64), (64, 0), (64, 64)] };
    let patches = extract_patches(&r, &all, 64).unwrap();
    let stats = compute_norm_stats(&patches).unwrap();
    let normed: Vec<f32> = patches.iter().flat_map(|p| normalize(p, &stats)).collect();
    let n = normed.len() as f64;
    let mean = normed.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = normed.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() < 1e-5 && (var.sqrt() - 1.0).abs() < 1e-5);

    let shifted: Vec<PatchPair> =
        patches.iter().map(|p| PatchPair { image: p.image.iter().map(|v| v + 3.0).collect(), ..p.clone() }).collect();
    let s2 = compute_norm_stats(&shifted).unwrap();
    assert!((s2.mean - stats.mean - 3.0).abs() < 1e-4);
    assert!((s2.std - stats.std).abs() < 1e-4);
}

proptest! {
    #[test]
    fn split_is_an_exact_partition(tags in prop::collection::vec(0usize..5, 0..40), assign in prop::collection::vec(0usize..4, 5)) {
        let names = ["a", "b", "c", "d", "e"];
        let spec: BTreeMap<String, Split> = names.iter().zip(&assign).map(|(n, &s)| (n.to_string(), Split::ALL[s])).collect();
        let patches: Vec<PatchPair> = tags.iter().enumerate().map(|(i, &t)| {
            PatchPair::new(1, vec![i as f32], vec![0], PatchOrigin { raster: i, row: 0, col: 0 }, names[t].into()).unwrap()
        }).collect();
        let out = split_by_tag(patches.clone(), &spec).unwrap();
        let mut ids: Vec<usize> = Split::ALL.iter().flat_map(|&s| out.get(s).iter().map(|p| p.origin.raster)).collect();
        ids.sort_unstable();
        prop_assert_eq!(ids, (0..patches.len()).collect::<Vec<_>>());
        for s in Split::ALL {
            for p in out.get(s) {
                prop_assert_eq!(spec[&p.tag], s);
            }
        }
    }

    #[test]
    fn remap_pushforward_of_counts(labels in prop::collection::vec(0u8..6, 1..200), targets in prop::collection::vec(0u8..3, 6)) {
        let table = RemapTable::new(targets.iter().enumerate().map(|(s, &t)| (s as u8, t)).collect(), 3).unwrap();
        let n = labels.len();
        let patch = PatchPair { size: 0, image: vec![0.0; n], labels, origin: PatchOrigin { raster: 0, row: 0, col: 0 }, tag: String::new() };
        let before = compute_class_stats([patch.labels.as_slice()], 6).unwrap();
        let after = compute_class_stats([remap_labels(&patch, &table).unwrap().labels.as_slice()], 3).unwrap();
        prop_assert_eq!(after.counts, table.push_forward(&before.counts).unwrap());
    }

    #[test]
    fn extracted_tiles_are_disjoint(h in 8usize..40, w in 8usize..40, p in 3usize..8, anchors in prop::collection::vec((0usize..40, 0usize..40), 1..20)) {
        let r = Raster::new(h, w, vec![0.5; h * w], vec![0; h * w], String::new()).unwrap();
        let set = AnchorSet { raster: 0, anchors: anchors.into_iter().filter(|&(a, b)| a < h && b < w).collect() };
        let tiles = extract_patches(&r, &set, p).unwrap();
        let mut cover = vec![0u8; h * w];
        for t in &tiles {
            prop_assert!(t.origin.row + p <= h && t.origin.col + p <= w);
            for y in t.origin.row..t.origin.row + p {
                for x in t.origin.col..t.origin.col + p {
                    cover[y * w + x] += 1;
                }
            }
        }
        prop_assert!(cover.iter().all(|&c| c <= 1));
        let expected = set.anchors.iter().filter(|&&(a, b)| a < (h / p) * p && b < (w / p) * p)
            .map(|&(a, b)| (a / p, b / p)).collect::<std::collections::BTreeSet<_>>().len();
        prop_assert_eq!(tiles.len(), expected);
    }
}
