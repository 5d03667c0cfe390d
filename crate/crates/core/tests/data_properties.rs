use std::collections::BTreeSet;

use proptest::prelude::*;
use urveda::data::nifti::{read_nifti1, write_nifti1, Datatype, Endian, Volume, WriteOptions};
use urveda::data::phantom::{generate_phantom, phantom_geometry, PhantomParams};
use urveda::data::resample::{normalize_resize, resize_nearest, Plane};
use urveda::data::split::kfold_split;

fn datatype() -> impl Strategy<Value = Datatype> {
    prop::sample::select(vec![Datatype::U8, Datatype::I16, Datatype::F32, Datatype::F64])
}

/// Values representable in `dt`, so storage is lossless.
fn representable(dt: Datatype, raw: &[i32]) -> Vec<f64> {
    raw.iter()
        .map(|&r| match dt {
            Datatype::U8 => (r.rem_euclid(256)) as f64,
            Datatype::I16 => (r % 32768) as f64,
            Datatype::F32 => r as f32 as f64 / 8.0,
            Datatype::F64 => r as f64 / 3.0,
        })
        .collect()
}

proptest! {
    #[test]
    fn nifti_round_trip(
        dims in prop::collection::vec(1usize..=5, 1..=4),
        dt in datatype(),
        big in any::<bool>(),
        seed in prop::collection::vec(any::<i32>(), 625),
        spacing in prop::collection::vec(0.25f32..4.0, 4),
    ) {
        let n: usize = dims.iter().product();
        let vol = Volume {
            spacing: spacing[..dims.len()].iter().map(|&s| s as f64).collect(),
            data: representable(dt, &seed[..n]),
            dims,
            datatype: dt,
        };
        let endian = if big { Endian::Big } else { Endian::Little };
        let bytes = write_nifti1(&vol, &WriteOptions { endian, ..Default::default() }).unwrap();
        let back = read_nifti1(&bytes).unwrap();
        prop_assert_eq!(&back.dims, &vol.dims);
        prop_assert_eq!(&back.spacing, &vol.spacing);
        prop_assert_eq!(
            back.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            vol.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn normalized_output_in_unit_range(
        (h, w, data) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(-1e3f64..1e3, h * w))),
        th in 1usize..12,
        tw in 1usize..12,
    ) {
        let t = normalize_resize(&Plane::new(h, w, data).unwrap(), (th, tw)).unwrap();
        prop_assert_eq!(t.shape(), &[1, th, tw]);
        prop_assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mask_resampling_keeps_label_set(
        (h, w, labels) in (1usize..8, 1usize..8).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0u8..4, h * w))),
        th in 1usize..12,
        tw in 1usize..12,
    ) {
        let out = resize_nearest(&labels, (h, w), th, tw).unwrap();
        let before: BTreeSet<u8> = labels.iter().copied().collect();
        prop_assert!(out.iter().all(|l| before.contains(l)));
    }

    #[test]
    fn phantom_matches_geometry_oracle(seed in any::<u64>(), half in prop::sample::select(vec![8usize, 16, 32])) {
        let (h, w) = (2 * half, 2 * half);
        let p = PhantomParams::default();
        let s = generate_phantom(seed, h, w, &p).unwrap();
        let g = phantom_geometry(seed, h, w, &p).unwrap();
        // independent membership test per pixel
        let inside = |c: (f64, f64), r: f64, y: usize, x: usize| {
            let (dy, dx) = (y as f64 - c.0, x as f64 - c.1);
            dy * dy + dx * dx <= r * r
        };
        for y in 0..h {
            for x in 0..w {
                let lv = inside(g.center, g.lv_radius, y, x);
                let epi = inside(g.center, g.epi_radius, y, x);
                let rv = inside(g.rv_center, g.rv_radius, y, x) && !epi;
                let myo = epi && !lv;
                // regions are disjoint by construction of the oracle
                prop_assert!(usize::from(lv) + usize::from(myo) + usize::from(rv) <= 1);
                let expected = if lv { 3 } else if myo { 2 } else if rv { 1 } else { 0 };
                prop_assert_eq!(s.mask.get(y, x), expected);
            }
        }
    }

    #[test]
    fn folds_partition_ids(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let ids: Vec<usize> = (0..n).collect();
        let folds = kfold_split(&ids, k, seed).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.validation.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.validation.clone()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, ids.clone());
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.validation.len(), n);
        }
    }
}
