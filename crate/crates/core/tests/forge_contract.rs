use std::collections::BTreeMap;
use std::fs;

use gamma_core::datapipe::{write_corpus, ImageEncoding, Manifest, Split};
use gamma_core::forge::{
    blend_inpaint, forge_one, synthetic_authentic, synthetic_corpus, ForgeOp, ForgeOptions, MASK_ON,
};
use gamma_core::{assign_labels, SourceCategory};
use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Rows of the training-label table: cls, mani bg/fg, ai bg/fg.
const TABLE: [(&str, [u8; 5]); 5] = [
    ("real", [0, 0, 0, 0, 0]),
    ("inpaint", [1, 0, 1, 1, 1]),
    ("inpaint_blended", [1, 0, 1, 0, 1]),
    ("copymove", [0, 0, 1, 0, 0]),
    ("splicing", [0, 0, 1, 0, 0]),
];

#[test]
fn label_table_is_reproduced_exactly() {
    let mut seen = 0;
    for category in SourceCategory::ALL {
        let (_, row) = TABLE.iter().find(|(n, _)| *n == category.as_str()).expect("category in table");
        let l = assign_labels(category);
        assert_eq!([l.cls, l.mani_bg, l.mani_fg, l.ai_bg, l.ai_fg], *row, "{category}");
        seen += 5;
    }
    assert_eq!(seen, 25);
}

#[test]
fn blend_takes_each_pixel_from_the_right_image() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let original = RgbImage::from_fn(64, 64, |_, _| Rgb(rng.random()));
        let inpainted = RgbImage::from_fn(64, 64, |_, _| Rgb(rng.random()));
        let p = rng.random_range(0.0..1.0);
        let mask = GrayImage::from_fn(64, 64, |_, _| Luma([if rng.random_bool(p) { 255 } else { 0 }]));
        let out = blend_inpaint(&original, &inpainted, &mask).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            let expected = if mask.get_pixel(x, y)[0] != 0 { inpainted.get_pixel(x, y) } else { original.get_pixel(x, y) };
            assert_eq!(px, expected);
        }
    }
}

#[test]
fn forged_masks_follow_category_labels() {
    let options = ForgeOptions {
        region_fraction: (0.3, 0.5),
        ..ForgeOptions::default()
    };
    let source = synthetic_authentic(48, 40, 1);
    let donor = synthetic_authentic(48, 40, 2);
    for (i, op) in [ForgeOp::Real, ForgeOp::Inpaint, ForgeOp::Blend, ForgeOp::CopyMove, ForgeOp::Splice]
        .into_iter()
        .enumerate()
    {
        let s = forge_one(op, &source, &donor, None, 10 + i as u64, &options).unwrap();
        let l = assign_labels(op.category());
        let fg = |m: &GrayImage| m.pixels().filter(|p| p[0] == MASK_ON).count();
        let area = 48 * 40;
        let mani = fg(&s.masks.mani);
        let ai = fg(&s.masks.ai);
        match l.mani_fg {
            0 => assert_eq!(mani, 0, "{op:?}"),
            _ => assert!(mani > 0 && mani < area, "{op:?}"),
        }
        match (l.ai_bg, l.ai_fg) {
            (0, 0) => assert_eq!(ai, 0),
            (1, 1) => assert_eq!(ai, area),
            _ => assert_eq!(s.masks.ai, s.masks.mani),
        }
        if op == ForgeOp::Blend {
            for (x, y, m) in s.masks.mani.enumerate_pixels() {
                if m[0] == 0 {
                    assert_eq!(s.image.get_pixel(x, y), source.get_pixel(x, y));
                }
            }
        }
    }
}

#[test]
fn written_corpus_matches_directory_scan() {
    let dir = tempfile::tempdir().unwrap();
    let plan = [(ForgeOp::Real, 3), (ForgeOp::Inpaint, 2), (ForgeOp::CopyMove, 4), (ForgeOp::Splice, 1)];
    let samples = synthetic_corpus(&plan, (32, 32), &ForgeOptions::default()).unwrap();
    let manifest = write_corpus(dir.path(), &samples, ImageEncoding::Png, Split::Train, None).unwrap();
    manifest.save(dir.path().join("manifest.tsv")).unwrap();

    let images = fs::read_dir(dir.path().join("images")).unwrap().count();
    assert_eq!(images, manifest.len());
    let masks = fs::read_dir(dir.path().join("masks")).unwrap().count();
    let referenced: usize = manifest
        .records
        .iter()
        .map(|r| usize::from(r.mask_mani_path.is_some()) + usize::from(r.mask_ai_path.is_some()))
        .sum();
    assert_eq!(masks, referenced);

    let reread = Manifest::load(dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(reread.records, manifest.records);
    let mut counts = BTreeMap::new();
    for r in &reread.records {
        *counts.entry(r.category).or_insert(0) += 1;
        assert_eq!(r.cls_label, assign_labels(r.category).cls);
    }
    assert_eq!(counts, reread.category_counts());
    assert_eq!(counts[&SourceCategory::CopyMove], 4);
    for (i, s) in samples.iter().enumerate() {
        let loaded = reread.load_sample(i).unwrap();
        assert_eq!(loaded.image, s.image);
        assert_eq!(loaded.mask_mani, s.masks.mani);
        assert_eq!(loaded.mask_ai, s.masks.ai);
    }
}

#[test]
fn empty_plan_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_corpus(&[(ForgeOp::CopyMove, 0)], (32, 32), &ForgeOptions::default()).unwrap();
    let m = write_corpus(dir.path(), &samples, ImageEncoding::Jpeg(96), Split::Train, Some("x")).unwrap();
    assert!(m.is_empty());
    assert_eq!(m.to_text(), "");
}
