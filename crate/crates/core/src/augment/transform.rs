use std::fmt;
use std::str::FromStr;

use ndarray::{s, Axis};

use super::PixelTensor;

/// Exact pixel permutations: rotations are counterclockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformOp {
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl TransformOp {
    pub const ALL: [TransformOp; 5] = [
        TransformOp::Rot90,
        TransformOp::Rot180,
        TransformOp::Rot270,
        TransformOp::HFlip,
        TransformOp::VFlip,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransformOp::Rot90 => "rot90",
            TransformOp::Rot180 => "rot180",
            TransformOp::Rot270 => "rot270",
            TransformOp::HFlip => "hflip",
            TransformOp::VFlip => "vflip",
        }
    }
}

impl fmt::Display for TransformOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransformOp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| format!("unknown transform `{s}`"))
    }
}

pub fn transform_by_name(image: &PixelTensor, op: TransformOp) -> PixelTensor {
    let data = image.data();
    let out = match op {
        TransformOp::HFlip => data.slice(s![.., ..;-1, ..]).to_owned(),
        TransformOp::VFlip => data.slice(s![..;-1, .., ..]).to_owned(),
        TransformOp::Rot180 => data.slice(s![..;-1, ..;-1, ..]).to_owned(),
        // out[i][j] = in[j][W-1-i]
        TransformOp::Rot90 => {
            let mut t = data.view().permuted_axes([1, 0, 2]);
            t.invert_axis(Axis(0));
            t.to_owned()
        }
        // out[i][j] = in[H-1-j][i]
        TransformOp::Rot270 => {
            let mut t = data.view().permuted_axes([1, 0, 2]);
            t.invert_axis(Axis(1));
            t.to_owned()
        }
    };
    image.with_data(out)
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use proptest::prelude::*;

    use super::*;
    use crate::augment::ValueRange;

    fn arb_image(max: usize) -> impl Strategy<Value = PixelTensor> {
        (1..=max, 1..=max).prop_flat_map(|(h, w)| {
            proptest::collection::vec(0u8..=255, h * w * 3).prop_map(move |v| {
                let data = Array3::from_shape_vec((h, w, 3), v.into_iter().map(f32::from).collect())
                    .unwrap();
                PixelTensor::new(data, ValueRange::Raw0To255).unwrap()
            })
        })
    }

    fn apply_all(img: &PixelTensor, ops: &[TransformOp]) -> PixelTensor {
        ops.iter().fold(img.clone(), |acc, &op| transform_by_name(&acc, op))
    }

    /// Independent index remapping used as the oracle for every op.
    fn brute_force(img: &PixelTensor, op: TransformOp) -> PixelTensor {
        let (h, w, _) = img.data().dim();
        let src = img.data();
        let data = match op {
            TransformOp::HFlip => Array3::from_shape_fn((h, w, 3), |(y, x, c)| src[[y, w - 1 - x, c]]),
            TransformOp::VFlip => Array3::from_shape_fn((h, w, 3), |(y, x, c)| src[[h - 1 - y, x, c]]),
            TransformOp::Rot180 => {
                Array3::from_shape_fn((h, w, 3), |(y, x, c)| src[[h - 1 - y, w - 1 - x, c]])
            }
            TransformOp::Rot90 => Array3::from_shape_fn((w, h, 3), |(i, j, c)| src[[j, w - 1 - i, c]]),
            TransformOp::Rot270 => Array3::from_shape_fn((w, h, 3), |(i, j, c)| src[[h - 1 - j, i, c]]),
        };
        PixelTensor::new(data, ValueRange::Raw0To255).unwrap()
    }

    fn sorted_values(img: &PixelTensor) -> Vec<u32> {
        let mut v: Vec<u32> = img.data().iter().map(|&x| x as u32).collect();
        v.sort_unstable();
        v
    }

    #[test]
    fn names_round_trip() {
        for op in TransformOp::ALL {
            assert_eq!(op.as_str().parse::<TransformOp>(), Ok(op));
        }
        assert!("rot45".parse::<TransformOp>().is_err());
    }

    #[test]
    fn rot180_matches_brute_force_on_five_by_seven() {
        let data = Array3::from_shape_fn((5, 7, 3), |(y, x, c)| ((y * 7 + x) * 3 + c) as f32);
        let img = PixelTensor::new(data, ValueRange::Raw0To255).unwrap();
        let expected = brute_force(&img, TransformOp::Rot180);
        assert_eq!(transform_by_name(&img, TransformOp::Rot180), expected);
        assert_eq!(apply_all(&img, &[TransformOp::VFlip, TransformOp::HFlip]), expected);
    }

    proptest! {
        #[test]
        fn ops_match_index_remapping(img in arb_image(9)) {
            for op in TransformOp::ALL {
                prop_assert_eq!(transform_by_name(&img, op), brute_force(&img, op));
            }
        }

        #[test]
        fn dihedral_relations_hold(img in arb_image(8)) {
            use TransformOp::*;
            prop_assert_eq!(&apply_all(&img, &[Rot90, Rot90, Rot90, Rot90]), &img);
            prop_assert_eq!(&apply_all(&img, &[HFlip, HFlip]), &img);
            prop_assert_eq!(&apply_all(&img, &[VFlip, VFlip]), &img);
            prop_assert_eq!(transform_by_name(&img, Rot180), apply_all(&img, &[VFlip, HFlip]));
            // hflip after rot90 equals rot270 after hflip
            prop_assert_eq!(apply_all(&img, &[Rot90, HFlip]), apply_all(&img, &[HFlip, Rot270]));
            prop_assert_eq!(apply_all(&img, &[Rot90, Rot270]), img.clone());
        }

        #[test]
        fn pixel_multiset_is_preserved(img in arb_image(8)) {
            let base = sorted_values(&img);
            for op in TransformOp::ALL {
                let out = transform_by_name(&img, op);
                prop_assert_eq!(sorted_values(&out), base.clone());
                let (h, w) = (img.height(), img.width());
                let expected = if matches!(op, TransformOp::Rot90 | TransformOp::Rot270) { (w, h) } else { (h, w) };
                prop_assert_eq!((out.height(), out.width()), expected);
            }
        }
    }
}
