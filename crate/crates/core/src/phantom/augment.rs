use super::types::{ImageSlice, LabelMap, PairedRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Identity,
    Horizontal,
    Vertical,
    Both,
}

impl Flip {
    pub const ALL: [Flip; 4] = [Flip::Identity, Flip::Horizontal, Flip::Vertical, Flip::Both];

    fn source_index(self, size: usize, y: usize, x: usize) -> usize {
        let (sy, sx) = match self {
            Flip::Identity => (y, x),
            Flip::Horizontal => (y, size - 1 - x),
            Flip::Vertical => (size - 1 - y, x),
            Flip::Both => (size - 1 - y, size - 1 - x),
        };
        sy * size + sx
    }

    pub fn apply<V: Copy>(self, size: usize, data: &[V]) -> Vec<V> {
        (0..size * size)
            .map(|i| data[self.source_index(size, i / size, i % size)])
            .collect()
    }
}

pub fn flip_image(img: &ImageSlice, flip: Flip) -> ImageSlice {
    ImageSlice::new(img.size(), img.modality(), flip.apply(img.size(), img.pixels()))
        .expect("flip preserves slice invariants")
}

pub fn flip_labels(labels: &LabelMap, flip: Flip) -> LabelMap {
    LabelMap::new(labels.size(), labels.source(), flip.apply(labels.size(), labels.classes()))
        .expect("flip preserves label invariants")
}

/// Identity, horizontal, vertical and both-axes flips of a record, in that order.
pub fn augment_flip(record: &PairedRecord) -> Vec<PairedRecord> {
    Flip::ALL
        .iter()
        .map(|&f| PairedRecord {
            subject_id: record.subject_id.clone(),
            mr: flip_image(&record.mr, f),
            ct: flip_image(&record.ct, f),
            label_mr: flip_labels(&record.label_mr, f),
            label_ct: flip_labels(&record.label_ct, f),
        })
        .collect()
}
