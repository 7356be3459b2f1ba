//! Paired MR/CT phantoms, their file format, dataset indexing and augmentation.

mod augment;
mod generate;
mod io;
mod types;

pub use augment::{augment_flip, flip_image, flip_labels, Flip};
pub use generate::{
    ct_value, generate_cohort, generate_phantom, generate_record, mr_value, phantom_geometry,
    Circle, Ellipse, Inconsistency, PhantomConfig, PhantomGeometry,
};
pub use io::{
    load_dataset, read_image, read_labels, read_record, write_dataset_meta, write_image,
    write_labels, write_record, DatasetIndex, DatasetMeta, ImageHeader, LabelHeader, RecordPaths,
    DATASET_META,
};
pub use types::{
    denormalize_ct, denormalize_hu, normalize_for_training, normalize_hu, ImageSlice, LabelMap,
    Modality, Organ, PairedRecord, HU_MAX, HU_MIN, NUM_CLASSES,
};

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn label_disagreement_lies_inside_organ_union(seed in 0u64..1_000_000) {
            let cfg = PhantomConfig::sample(64, seed, Inconsistency::Random);
            let (_, _, lmr, lct) = generate_phantom(&cfg).unwrap();
            for (a, b) in lmr.classes().iter().zip(lct.classes()) {
                if a != b {
                    prop_assert!(*a != 0 || *b != 0);
                }
            }
        }

        #[test]
        fn organ_regions_stay_off_the_border(seed in 0u64..1_000_000) {
            let cfg = PhantomConfig::sample(64, seed, Inconsistency::Random);
            let (_, _, lmr, lct) = generate_phantom(&cfg).unwrap();
            for l in [&lmr, &lct] {
                for i in 0..64 {
                    prop_assert_eq!(l.get(0, i), 0);
                    prop_assert_eq!(l.get(63, i), 0);
                    prop_assert_eq!(l.get(i, 0), 0);
                    prop_assert_eq!(l.get(i, 63), 0);
                }
            }
        }
    }
}
