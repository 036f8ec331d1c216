use super::{BBox, Lattice, Layout};
use crate::error::{Error, Result};

/// A batch of layouts padded to a common object count `m`, with an explicit
/// validity flag per object slot. Padded slots carry label 0 and a full-box
/// placeholder; every consumer masks them out.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutBatch {
    pub lattice: Lattice,
    pub n: usize,
    pub m: usize,
    pub labels: Vec<usize>,
    pub boxes: Vec<BBox>,
    pub valid: Vec<bool>,
}

impl LayoutBatch {
    pub fn from_layouts(layouts: &[Layout]) -> Result<Self> {
        Self::padded(layouts, 0)
    }

    /// Pads to at least `min_m` slots.
    pub fn padded(layouts: &[Layout], min_m: usize) -> Result<Self> {
        let first = layouts
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty layout batch".into()))?;
        let lattice = first.lattice;
        if let Some(l) = layouts.iter().find(|l| l.lattice != lattice) {
            return Err(Error::ShapeMismatch(format!(
                "mixed lattices {:?} and {:?} in one batch",
                lattice, l.lattice
            )));
        }
        let n = layouts.len();
        let m = layouts.iter().map(Layout::len).max().unwrap_or(0).max(min_m);
        let mut labels = vec![0; n * m];
        let mut boxes = vec![BBox::FULL; n * m];
        let mut valid = vec![false; n * m];
        for (i, l) in layouts.iter().enumerate() {
            for (j, o) in l.objects.iter().enumerate() {
                labels[i * m + j] = o.label;
                boxes[i * m + j] = o.bbox;
                valid[i * m + j] = true;
            }
        }
        Ok(Self {
            lattice,
            n,
            m,
            labels,
            boxes,
            valid,
        })
    }

    pub fn slots(&self) -> usize {
        self.n * self.m
    }

    /// Number of valid objects in each sample.
    pub fn counts(&self) -> Vec<usize> {
        self.valid
            .chunks(self.m.max(1))
            .map(|c| c.iter().filter(|&&v| v).count())
            .take(self.n)
            .collect()
    }

    /// `(sample, slot)` of every valid object, in slot order.
    pub fn valid_slots(&self) -> Vec<(usize, usize)> {
        (0..self.slots())
            .filter(|&k| self.valid[k])
            .map(|k| (k / self.m, k))
            .collect()
    }

    pub fn layout(&self, sample: usize) -> Layout {
        let objects = (0..self.m)
            .map(|j| sample * self.m + j)
            .filter(|&k| self.valid[k])
            .map(|k| super::ObjectSpec::new(self.labels[k], self.boxes[k]))
            .collect();
        Layout::new(self.lattice, objects)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::ObjectSpec;

    fn layout(m: usize) -> Layout {
        Layout::new(
            Lattice::square(16),
            (0..m)
                .map(|i| ObjectSpec::new(i % 3, BBox::new(0.0, 0.0, 0.5, 0.5)))
                .collect(),
        )
    }

    #[test]
    fn pads_to_batch_max_with_validity() {
        let b = LayoutBatch::from_layouts(&[layout(3), layout(5)]).unwrap();
        assert_eq!(b.m, 5);
        assert_eq!(b.counts(), vec![3, 5]);
        assert_eq!(b.valid_slots().len(), 8);
        assert_eq!(b.layout(0), layout(3));
        assert_eq!(b.layout(1), layout(5));
    }

    #[test]
    fn mixed_lattices_rejected() {
        let mut other = layout(2);
        other.lattice = Lattice::square(32);
        assert!(LayoutBatch::from_layouts(&[layout(2), other]).is_err());
    }
}
