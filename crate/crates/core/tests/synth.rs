//! Rendered scenes against their recorded annotations.

use std::collections::BTreeMap;

use circlenet::synth::{
    figure_contains, generate_dataset, generate_scene, split_by_bins, visibility_bin, SceneConfig, Texture, VisibilityBin,
};

fn pixel(image: &circlenet::Tensor32, x: usize, y: usize) -> [f32; 3] {
    let [_, _, h, w] = image.shape();
    let d = image.data();
    [d[y * w + x], d[(h + y) * w + x], d[(2 * h + y) * w + x]]
}

/// Visible fraction counted from the image: figure pixels still showing
/// the colour of the figure's topmost pixel.
fn recount(image: &circlenet::Tensor32, b: &circlenet::boxes::BBox) -> (f64, f64) {
    let [_, _, h, w] = image.shape();
    let mut colour = None;
    let (mut total, mut visible) = (0usize, 0usize);
    let mut widest = 0usize;
    for y in 0..h {
        let mut row = 0;
        for x in 0..w {
            if !figure_contains(b, x as f64 + 0.5, y as f64 + 0.5) {
                continue;
            }
            row += 1;
            total += 1;
            let p = pixel(image, x, y);
            if *colour.get_or_insert(p) == p {
                visible += 1;
            }
        }
        widest = widest.max(row);
    }
    (visible as f64 / total as f64, widest as f64 / total as f64)
}

#[test]
fn recorded_visibility_matches_rendered_pixels() {
    let cfg = SceneConfig { max_clutter: 0, occluder_probability: 0.8, ..SceneConfig::default() };
    for texture in [Texture::Flat, Texture::Noise] {
        let cfg = SceneConfig { texture, ..cfg.clone() };
        let mut occluded = 0;
        for i in 0..150 {
            let s = generate_scene(&cfg, i);
            for (g, o) in s.gts.iter().zip(&s.occluders) {
                let (v, row) = recount(&s.image, &g.bbox);
                assert!((v - g.visibility).abs() <= row, "scene {i}: rendered {v} recorded {}", g.visibility);
                if let Some(o) = o {
                    occluded += 1;
                    assert!(o.y2 >= g.bbox.y2 && o.x1 <= g.bbox.x1 && o.x2 >= g.bbox.x2, "occluder {o:?} for {:?}", g.bbox);
                }
            }
        }
        assert!(occluded > 100);
    }
}

#[test]
fn visibility_bins_follow_the_requested_distribution() {
    let p = 0.5;
    let cfg = SceneConfig { occluder_probability: p, min_occlusion: 0.0, max_occlusion: 0.75, ..SceneConfig::default() };
    let scenes = generate_dataset(&cfg, 1500).unwrap();
    let mut counts: BTreeMap<VisibilityBin, f64> = BTreeMap::new();
    let mut n = 0.0;
    for g in scenes.iter().flat_map(|s| &s.gts) {
        *counts.entry(visibility_bin(g.visibility)).or_default() += 1.0;
        n += 1.0;
    }
    let expected = [
        (VisibilityBin::None, 1.0 - p),
        (VisibilityBin::Partial, p * 0.35 / 0.75),
        (VisibilityBin::Heavy, p * 0.40 / 0.75),
    ];
    for (bin, q) in expected {
        let got = counts.get(&bin).copied().unwrap_or(0.0);
        let sigma = (n * q * (1.0 - q)).sqrt();
        assert!((got - n * q).abs() <= 3.0 * sigma, "{bin:?}: {got} of {n}, expected {:.1} +- {:.1}", n * q, 3.0 * sigma);
    }
    assert_eq!(counts.get(&VisibilityBin::Other), None);
}

#[test]
fn bins_partition_and_scenes_are_reproducible() {
    let cfg = SceneConfig { seed: 11, ..SceneConfig::default() };
    let a = generate_dataset(&cfg, 40).unwrap();
    let b = generate_dataset(&cfg, 40).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.gts, y.gts);
    }
    let other = generate_dataset(&SceneConfig { seed: 12, ..cfg }, 40).unwrap();
    assert!(a.iter().zip(&other).any(|(x, y)| x.gts != y.gts));
    let gts: Vec<_> = a.iter().flat_map(|s| s.gts.iter()).collect();
    let cells = split_by_bins(gts.iter().copied());
    assert_eq!(cells.values().sum::<usize>(), gts.len());
}
