use proptest::prelude::*;
use tlpim_core::dataset::{EyeImage, MaskSet};
use tlpim_core::mask::BinaryMask;
use tlpim_core::matcher::Decision;
use tlpim_core::net::CamMap;
use tlpim_core::visual::{
    enhance_contrast, export_layer_bundle, extract_contours, render_composite, render_pair_layers, BundleIndex,
    LayerFlags, PairEvidence, SampleEvidence,
};

const S: usize = 12;

fn mask() -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), S * S).prop_map(|b| BinaryMask::from_bits(S, S, b).unwrap())
}

fn case() -> impl Strategy<Value = (EyeImage, MaskSet, CamMap)> {
    (
        proptest::collection::vec(any::<u8>(), S * S),
        mask(),
        mask(),
        mask(),
        proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..=1.0], S * S),
    )
        .prop_map(|(px, i, h, w, cam)| {
            (
                EyeImage::new(S, S, px).unwrap(),
                MaskSet::new(i, h, w).unwrap(),
                CamMap { size: S, values: cam },
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn equalization_preserves_rank_order(px in proptest::collection::vec(any::<u8>(), 1..200)) {
        let img = EyeImage::new(px.len(), 1, px.clone()).unwrap();
        let out = enhance_contrast(&img);
        for i in 0..px.len() {
            for j in 0..px.len() {
                if px[i] <= px[j] {
                    prop_assert!(out.pixels()[i] <= out.pixels()[j]);
                }
            }
        }
    }

    #[test]
    fn contours_are_subsets_of_their_masks(m in mask()) {
        prop_assert!(extract_contours(&m).is_subset_of(&m));
    }

    #[test]
    fn enabling_a_layer_changes_only_its_support((crop, masks, cam) in case(), base in 0u8..32, layer in 0usize..5) {
        let bit = 1u8 << layer;
        let off = LayerFlags::from_bits(base & !bit);
        let on = LayerFlags::from_bits(base | bit);
        let a = render_composite(&crop, &masks, &cam, off).unwrap();
        let b = render_composite(&crop, &masks, &cam, on).unwrap();
        let support: Vec<bool> = match layer {
            0 => vec![true; S * S],
            1 => extract_contours(&masks.iris).bits().to_vec(),
            2 => extract_contours(&masks.highlight).bits().to_vec(),
            3 => extract_contours(&masks.wrinkle).bits().to_vec(),
            _ => cam.values.iter().map(|&v| v > 0.0).collect(),
        };
        for i in 0..S * S {
            if a.pixels[i] != b.pixels[i] {
                prop_assert!(support[i], "pixel {} changed outside layer {}", i, layer);
            }
        }
    }
}

fn evidence(id: &str, fill: u8) -> SampleEvidence {
    let crop = EyeImage::new(S, S, (0..S * S).map(|i| (i as u8).wrapping_mul(fill)).collect()).unwrap();
    let iris = BinaryMask::from_fn(S, S, |x, y| (2..10).contains(&x) && (2..10).contains(&y));
    SampleEvidence {
        sample_id: id.into(),
        crop,
        masks: MaskSet::new(iris, BinaryMask::new(S, S), BinaryMask::new(S, S)).unwrap(),
        cam: CamMap {
            size: S,
            values: (0..S * S).map(|i| (i % S) as f64 / (S - 1) as f64).collect(),
        },
        pmi_hours: Some(fill as f64),
    }
}

#[test]
fn bundle_is_complete_and_reproducible() {
    let pair = PairEvidence {
        pair_id: "p1".into(),
        probe: evidence("a", 3),
        reference: evidence("b", 5),
        similarity: 0.9,
        decision: Decision::Match,
    };
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let index = export_layer_bundle(&pair, d1.path(), LayerFlags::ALL).unwrap();
    export_layer_bundle(&pair, d2.path(), LayerFlags::ALL).unwrap();
    let parsed: BundleIndex = serde_json::from_str(&std::fs::read_to_string(&index).unwrap()).unwrap();
    assert_eq!(parsed.border, "green");
    assert_eq!(parsed.layers.len(), 8);
    assert_eq!(parsed.probe_pmi, Some(3.0));
    for (name, bytes) in render_pair_layers(&pair, LayerFlags::ALL).unwrap() {
        assert_eq!(std::fs::read(d1.path().join(&name)).unwrap(), bytes);
        assert_eq!(std::fs::read(d2.path().join(&name)).unwrap(), bytes);
    }
    assert_eq!(
        std::fs::read(&index).unwrap(),
        std::fs::read(d2.path().join("index.json")).unwrap()
    );

    let red = PairEvidence {
        decision: Decision::NonMatch,
        ..pair
    };
    let idx = export_layer_bundle(&red, d1.path(), LayerFlags::ALL).unwrap();
    assert!(std::fs::read_to_string(idx).unwrap().contains("\"red\""));
}
