use std::collections::BTreeSet;

use ruig::codec::BBox;
use ruig::geometry::intersection_area;
use ruig::synthgen::{
    gen_sample, gen_split, read_dataset, write_dataset, Element, GenSpec, Regime, PALETTE,
};

/// Resolves an instruction against a manifest by scanning every element.
fn resolve<'a>(manifest: &'a [Element], instruction: &str) -> Vec<&'a Element> {
    let w: Vec<&str> = instruction.split_whitespace().collect();
    let bx = |e: &Element| e.bbox;
    match w.as_slice() {
        ["click", label] => manifest.iter().filter(|e| e.label == *label).collect(),
        ["click", "the", color, "box"] => manifest.iter().filter(|e| e.color == *color).collect(),
        ["click", "the", "box", dir, "of", label] => {
            let anchors: Vec<&Element> = manifest.iter().filter(|e| e.label == *label).collect();
            if anchors.len() != 1 {
                return Vec::new();
            }
            let [ax0, ay0, ax1, ay1] = bx(anchors[0]);
            manifest
                .iter()
                .filter(|e| e.label != *label)
                .filter(|e| {
                    let [x0, y0, x1, y1] = bx(e);
                    let rows_meet = !(y1 < ay0 || ay1 < y0);
                    let cols_meet = !(x1 < ax0 || ax1 < x0);
                    match *dir {
                        "right" => x0 > ax1 && rows_meet,
                        "left" => x1 < ax0 && rows_meet,
                        "above" => y1 < ay0 && cols_meet,
                        "below" => y0 > ay1 && cols_meet,
                        _ => false,
                    }
                })
                .collect()
        }
        _ => Vec::new(),
    }
}

#[test]
fn every_instruction_has_exactly_one_referent() {
    let spec = GenSpec::default();
    let mut kinds = [0usize; 3];
    // placement failures are the caller's cue to reseed
    for (seed, s) in (0..600u64).filter_map(|seed| gen_sample(seed, &spec).ok().map(|s| (seed, s)))
    {
        let hits = resolve(&s.manifest, &s.instruction);
        assert_eq!(
            hits.len(),
            1,
            "seed {seed}: `{}` -> {} referents",
            s.instruction,
            hits.len()
        );
        assert_eq!(hits[0].bbox(), s.gt, "seed {seed}");
        let n = s.instruction.split_whitespace().count();
        kinds[match n {
            2 => 0,
            4 => 1,
            _ => 2,
        }] += 1;
    }
    assert!(kinds.iter().all(|&k| k > 50), "template mix {kinds:?}");
}

#[test]
fn elements_are_disjoint_and_inside_the_image() {
    let spec = GenSpec::default();
    for (seed, s) in (0..400u64).filter_map(|seed| gen_sample(seed, &spec).ok().map(|s| (seed, s)))
    {
        assert!((spec.min_elements..=spec.max_elements).contains(&s.manifest.len()));
        for (i, a) in s.manifest.iter().enumerate() {
            assert!(a.bbox().fits(spec.width, spec.height));
            for b in &s.manifest[i + 1..] {
                assert_eq!(intersection_area(&a.bbox(), &b.bbox()), 0, "seed {seed}");
            }
        }
    }
}

#[test]
fn relational_example_resolves_to_the_right_neighbour() {
    let el = |label: &str, b: [u32; 4]| Element {
        label: label.into(),
        color: "red".into(),
        bbox: b,
    };
    let m = [el("cat", [10, 5, 20, 15]), el("dog", [30, 5, 40, 15])];
    let hits = resolve(&m, "click the box right of cat");
    assert_eq!(hits.len(), 1);
    assert_eq!(hits[0].bbox(), BBox::new(30, 5, 40, 15));
}

#[test]
fn single_element_label_template() {
    let spec = GenSpec {
        min_elements: 1,
        max_elements: 1,
        template_mix: [1.0, 0.0, 0.0],
        ..GenSpec::default()
    };
    for seed in 0..20 {
        let s = gen_sample(seed, &spec).unwrap();
        assert_eq!(s.instruction, format!("click {}", s.manifest[0].label));
        assert_eq!(s.gt, s.manifest[0].bbox());
    }
}

#[test]
fn element_fill_uses_the_palette_color() {
    let s = gen_sample(3, &GenSpec::default()).unwrap();
    for e in &s.manifest {
        let rgb = PALETTE.iter().find(|(n, _)| *n == e.color).unwrap().1;
        let [x0, y0, ..] = e.bbox;
        let at = ((y0 * s.width + x0) * 3) as usize;
        assert_eq!(&s.pixels[at..at + 3], &rgb);
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = GenSpec::default();
    assert_eq!(
        gen_sample(42, &spec).unwrap(),
        gen_sample(42, &spec).unwrap()
    );
    assert_ne!(
        gen_sample(42, &spec).unwrap().pixels,
        gen_sample(43, &spec).unwrap().pixels
    );
}

#[test]
fn unseen_split_has_disjoint_labels() {
    let spec = GenSpec {
        regime: Regime::Unseen,
        ..GenSpec::default()
    };
    let (train, test) = gen_split(&spec, 200, 100, 9).unwrap();
    let labels = |v: &[ruig::synthgen::GroundingSample]| -> BTreeSet<String> {
        v.iter()
            .flat_map(|s| s.manifest.iter().map(|e| e.label.clone()))
            .collect()
    };
    let (a, b) = (labels(&train), labels(&test));
    assert!(!a.is_empty() && !b.is_empty());
    assert!(
        a.is_disjoint(&b),
        "{:?}",
        a.intersection(&b).collect::<Vec<_>>()
    );
    for s in test.iter().chain(&train) {
        assert_eq!(resolve(&s.manifest, &s.instruction).len(), 1);
    }
}

#[test]
fn split_preconditions() {
    let spec = GenSpec::default();
    assert!(gen_split(&spec, 10, 0, 0).is_err());
    assert!(gen_split(&spec, 0, 10, 0).is_err());
    let tiny = GenSpec {
        words: 6,
        regime: Regime::Unseen,
        ..GenSpec::default()
    };
    assert!(gen_split(&tiny, 10, 10, 0).is_err());
    let (a, _) = gen_split(&spec, 5, 5, 1).unwrap();
    let (b, _) = gen_split(&spec, 5, 5, 1).unwrap();
    assert_eq!(a, b);
}

#[test]
fn dataset_round_trip() {
    let spec = GenSpec::default();
    let (train, _) = gen_split(&spec, 100, 1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&train, &spec, dir.path()).unwrap();
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.spec, spec);
    assert_eq!(ds.vocab, spec.vocab());
    assert_eq!(ds.samples.len(), 100);
    for (a, b) in train.iter().zip(&ds.samples) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.instruction, b.instruction);
        assert_eq!(a.gt, b.gt);
        assert_eq!(a.manifest, b.manifest);
        let (ia, ib) = (a.image(), b.image());
        let worst = ia
            .data()
            .iter()
            .zip(ib.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
    }
}

#[test]
fn corrupt_dataset_is_rejected() {
    let spec = GenSpec::default();
    let (train, _) = gen_split(&spec, 3, 1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&train, &spec, dir.path()).unwrap();
    let ann = dir.path().join("annotations.jsonl");
    let text = std::fs::read_to_string(&ann).unwrap();
    std::fs::write(
        &ann,
        text.replace("\"schema_version\":1", "\"schema_version\":9"),
    )
    .unwrap();
    assert!(read_dataset(dir.path()).is_err());
    std::fs::write(&ann, text).unwrap();
    std::fs::remove_file(
        dir.path()
            .join("images")
            .join(format!("{}.ppm", train[0].id)),
    )
    .unwrap();
    assert!(read_dataset(dir.path()).is_err());
}
