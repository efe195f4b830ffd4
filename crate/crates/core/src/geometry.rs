//! Boxes and run-length masks.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeometryError {
    #[error("invalid box [{0}, {1}, {2}, {3}]")]
    InvalidBox(f64, f64, f64, f64),
    #[error("mask runs sum to {sum}, expected {expected}")]
    RunMismatch { sum: u64, expected: u64 },
    #[error("mask has no foreground pixels")]
    EmptyMask,
    #[error("mask buffer has {0} pixels, expected {1}")]
    BufferSize(usize, usize),
}

/// Axis-aligned pixel box; `x2`/`y2` are exclusive. Serialized as
/// `[x1, y1, x2, y2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, GeometryError> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(GeometryError::InvalidBox(x1, y1, x2, y2));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Grow by `frac` of width/height on every side, then clip to the frame.
    /// Returns `None` if nothing of the box lies inside the frame.
    pub fn padded_clipped(&self, frac: f64, width: u32, height: u32) -> Option<BBox> {
        let dx = self.width() * frac;
        let dy = self.height() * frac;
        BBox::new(
            (self.x1 - dx).max(0.0),
            (self.y1 - dy).max(0.0),
            (self.x2 + dx).min(width as f64),
            (self.y2 + dy).min(height as f64),
        )
        .ok()
    }

    /// Clip to the frame, `None` if the box falls outside it.
    pub fn clipped(&self, width: u32, height: u32) -> Option<BBox> {
        self.padded_clipped(0.0, width, height)
    }

    /// Integer pixel bounds covering the box, for cropping.
    pub fn pixel_bounds(&self) -> (u32, u32, u32, u32) {
        (
            self.x1.floor().max(0.0) as u32,
            self.y1.floor().max(0.0) as u32,
            self.x2.ceil().max(0.0) as u32,
            self.y2.ceil().max(0.0) as u32,
        )
    }

    /// Componentwise linear interpolation, `t` in `[0, 1]`.
    pub fn lerp(&self, other: &BBox, t: f64) -> BBox {
        let f = |a: f64, b: f64| a + (b - a) * t;
        BBox {
            x1: f(self.x1, other.x1),
            y1: f(self.y1, other.y1),
            x2: f(self.x2, other.x2),
            y2: f(self.y2, other.y2),
        }
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Intersection over union. Always in `[0, 1]` for valid boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Binary mask as alternating background/foreground run lengths in
/// row-major order, starting with a (possibly empty) background run.
/// Wire form is `{h, w, runs}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRle {
    #[serde(rename = "h")]
    pub height: u32,
    #[serde(rename = "w")]
    pub width: u32,
    pub runs: Vec<u32>,
}

impl MaskRle {
    pub fn new(height: u32, width: u32, runs: Vec<u32>) -> Result<Self, GeometryError> {
        let m = Self { height, width, runs };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let sum: u64 = self.runs.iter().map(|&r| r as u64).sum();
        let expected = self.height as u64 * self.width as u64;
        if sum != expected {
            return Err(GeometryError::RunMismatch { sum, expected });
        }
        Ok(())
    }

    pub fn encode(mask: &[bool], height: u32, width: u32) -> Result<Self, GeometryError> {
        let expected = height as usize * width as usize;
        if mask.len() != expected {
            return Err(GeometryError::BufferSize(mask.len(), expected));
        }
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &px in mask {
            if px != current {
                runs.push(len);
                current = px;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Ok(Self { height, width, runs })
    }

    pub fn decode(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.height as usize * self.width as usize);
        for (i, &r) in self.runs.iter().enumerate() {
            out.extend(std::iter::repeat_n(i % 2 == 1, r as usize));
        }
        out
    }

    pub fn area(&self) -> u64 {
        self.runs.iter().skip(1).step_by(2).map(|&r| r as u64).sum()
    }

    /// Tight box around the foreground, exclusive max edges.
    pub fn to_box(&self) -> Result<BBox, GeometryError> {
        self.validate()?;
        let w = self.width as u64;
        let (mut x1, mut y1, mut x2, mut y2) = (u64::MAX, u64::MAX, 0u64, 0u64);
        let mut at = 0u64;
        for (i, &r) in self.runs.iter().enumerate() {
            let r = r as u64;
            if i % 2 == 1 && r > 0 {
                let (first, last) = (at, at + r - 1);
                let (r0, r1) = (first / w, last / w);
                y1 = y1.min(r0);
                y2 = y2.max(r1 + 1);
                if r0 == r1 {
                    x1 = x1.min(first % w);
                    x2 = x2.max(last % w + 1);
                } else {
                    // a run crossing a row boundary reaches the last column of
                    // its first row and column 0 of its last row
                    x1 = 0;
                    x2 = w;
                }
            }
            at += r;
        }
        if x2 == 0 {
            return Err(GeometryError::EmptyMask);
        }
        Ok(BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
        })
    }
}

pub fn mask_to_box(m: &MaskRle) -> Result<BBox, GeometryError> {
    m.to_box()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn mask_with(height: u32, width: u32, on: &[(u32, u32)]) -> MaskRle {
        let mut px = vec![false; (height * width) as usize];
        for &(r, c) in on {
            px[(r * width + c) as usize] = true;
        }
        MaskRle::encode(&px, height, width).unwrap()
    }

    #[test]
    fn iou_cases() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)), 1.0);
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(5., 5., 6., 6.)), 0.0);
        assert!((iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)) - 1.0 / 7.0).abs() < 1e-15);
        // touching edges do not overlap
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(2., 0., 4., 2.)), 0.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2., 0., 2., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
        assert!(serde_json::from_str::<BBox>("[3, 3, 1, 1]").is_err());
        assert_eq!(serde_json::to_string(&b(1., 2., 3., 4.)).unwrap(), "[1.0,2.0,3.0,4.0]");
    }

    #[test]
    fn mask_box_two_pixels() {
        let m = mask_with(8, 10, &[(2, 3), (5, 7)]);
        assert_eq!(mask_to_box(&m).unwrap(), b(3., 2., 8., 6.));
    }

    #[test]
    fn mask_box_full_and_single() {
        let full = MaskRle::new(4, 6, vec![0, 24]).unwrap();
        assert_eq!(mask_to_box(&full).unwrap(), b(0., 0., 6., 4.));
        let one = mask_with(5, 5, &[(3, 1)]);
        assert_eq!(mask_to_box(&one).unwrap(), b(1., 3., 2., 4.));
    }

    #[test]
    fn mask_box_row_wrapping_run() {
        // pixels (0,4) and (1,0) form one run across the row boundary
        let m = mask_with(3, 5, &[(0, 4), (1, 0)]);
        assert_eq!(m.runs, vec![4, 2, 9]);
        assert_eq!(mask_to_box(&m).unwrap(), b(0., 0., 5., 2.));
    }

    #[test]
    fn empty_mask_errors() {
        let m = MaskRle::new(2, 2, vec![4]).unwrap();
        assert_eq!(mask_to_box(&m), Err(GeometryError::EmptyMask));
        assert!(MaskRle::new(2, 2, vec![1, 1]).is_err());
    }

    #[test]
    fn rle_wire_names() {
        let m = MaskRle::new(1, 2, vec![1, 1]).unwrap();
        assert_eq!(serde_json::to_string(&m).unwrap(), r#"{"h":1,"w":2,"runs":[1,1]}"#);
        assert_eq!(m.decode(), vec![false, true]);
        assert_eq!(m.area(), 1);
    }

    #[test]
    fn pad_and_clip() {
        let p = b(10., 10., 20., 30.).padded_clipped(0.1, 100, 31).unwrap();
        assert_eq!(p, b(9., 8., 21., 31.));
        assert!(b(200., 200., 210., 210.).clipped(100, 100).is_none());
    }
}
