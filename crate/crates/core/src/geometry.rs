//! Box arithmetic, per-category NMS and the 16-value pairwise spatial encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::types::Detection;

pub const SPATIAL_DIM: usize = 16;

/// Axis-aligned box in pixels, `[x1, y1, x2, y2]` with exclusive far corner.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 > self.x1
            && self.y2 > self.y1
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Clamps into `[0, w] x [0, h]`; the result may be empty but never inverted.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        let x1 = self.x1.clamp(0.0, w);
        let y1 = self.y1.clamp(0.0, h);
        Self::new(x1, y1, self.x2.clamp(x1, w), self.y2.clamp(y1, h))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    w * h
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy NMS within each (role, category); survivors ordered by descending score.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &dets[i];
        let suppressed = kept.iter().any(|&k| {
            let o = &dets[k];
            o.role == d.role && o.category == d.category && iou(&o.bbox, &d.bbox) >= iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i].clone()).collect()
}

/// Pairwise spatial encoding of `(a, b)` in a `frame_w x frame_h` frame.
///
/// Layout, for `a` then `b`: centre x/W, centre y/H, w/W, h/H, area/(WH),
/// aspect w/h; then IoU, Δcx/w_a, Δcy/h_a and centre distance over the
/// frame diagonal.
pub fn spatial_encoding(a: &BoundingBox, b: &BoundingBox, frame_w: f64, frame_h: f64) -> Result<[f64; SPATIAL_DIM]> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(Error::Geometry(format!("frame size {frame_w}x{frame_h}")));
    }
    if !(a.width() > 0.0 && a.height() > 0.0) {
        return Err(Error::Geometry(format!("degenerate reference box {a:?}")));
    }
    if !b.is_valid() {
        return Err(Error::Geometry(format!("invalid partner box {b:?}")));
    }
    let mut out = [0.0; SPATIAL_DIM];
    for (slot, bx) in [a, b].into_iter().enumerate() {
        let (cx, cy) = bx.center();
        let (w, h) = (bx.width(), bx.height());
        out[slot * 6..slot * 6 + 6].copy_from_slice(&[
            cx / frame_w,
            cy / frame_h,
            w / frame_w,
            h / frame_h,
            w * h / (frame_w * frame_h),
            w / h,
        ]);
    }
    let (acx, acy) = a.center();
    let (bcx, bcy) = b.center();
    let (dx, dy) = (bcx - acx, bcy - acy);
    out[12] = iou(a, b);
    out[13] = dx / a.width();
    out[14] = dy / a.height();
    out[15] = (dx * dx + dy * dy).sqrt() / (frame_w * frame_w + frame_h * frame_h).sqrt();
    Ok(out)
}

/// `[|a|, |b|, 16]` encodings over the Cartesian product.
pub fn encode_pairs(a: &[BoundingBox], b: &[BoundingBox], frame_w: f64, frame_h: f64) -> Result<Tensor> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Geometry("encode_pairs needs non-empty box lists".into()));
    }
    let mut data = Vec::with_capacity(a.len() * b.len() * SPATIAL_DIM);
    for ba in a {
        for bb in b {
            data.extend_from_slice(&spatial_encoding(ba, bb, frame_w, frame_h)?);
        }
    }
    Tensor::new(&[a.len(), b.len(), SPATIAL_DIM], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Role;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox {
        BoundingBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn iou_hand_cases() {
        let a = bx(0., 0., 10., 10.);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(20., 20., 30., 30.)), 0.0);
        assert!((iou(&a, &bx(5., 0., 15., 10.)) - 1.0 / 3.0).abs() < 1e-15);
    }

    fn det(cat: usize, b: BoundingBox, score: f64) -> Detection {
        Detection::new(Role::Instrument, cat, b, score)
    }

    #[test]
    fn nms_cases() {
        let one = vec![det(0, bx(0., 0., 10., 10.), 0.3)];
        assert_eq!(nms(&one, 0.5), one);

        // IoU of these two is 0.6 (width 10 vs overlap 7.5: 75 / 125)
        let a = bx(0., 0., 10., 10.);
        let b = bx(2.5, 0., 12.5, 10.);
        assert!((iou(&a, &b) - 0.6).abs() < 1e-12);
        let kept = nms(&[det(0, b, 0.8), det(0, a, 0.9)], 0.5);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let kept = nms(&[det(0, a, 0.9), det(1, a, 0.8)], 0.5);
        assert_eq!(kept.len(), 2, "different categories never suppress");
        let mut t = det(0, a, 0.5);
        t.role = Role::Tissue;
        assert_eq!(nms(&[det(0, a, 0.9), t], 0.5).len(), 2, "different roles never suppress");
    }

    #[test]
    fn spatial_encoding_identities() {
        let a = bx(3., 4., 20., 30.);
        let e = spatial_encoding(&a, &a, 100., 80.).unwrap();
        assert_eq!(&e[12..], &[1.0, 0.0, 0.0, 0.0]);

        let full = bx(0., 0., 100., 80.);
        let e = spatial_encoding(&full, &full, 100., 80.).unwrap();
        assert_eq!(&e[..6], &[0.5, 0.5, 1.0, 1.0, 1.0, 100. / 80.]);

        let e = spatial_encoding(&bx(0., 0., 10., 10.), &bx(10., 0., 20., 10.), 100., 100.).unwrap();
        assert_eq!(e[12], 0.0);
        assert_eq!(e[13], 1.0);
        assert_eq!(e[14], 0.0);
        assert!((e[15] - 10.0 / (2.0f64 * 100.0 * 100.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn degenerate_reference_box_is_rejected() {
        let flat = bx(5., 5., 5., 9.);
        assert!(spatial_encoding(&flat, &bx(0., 0., 1., 1.), 10., 10.).is_err());
        assert!(spatial_encoding(&bx(0., 0., 1., 1.), &bx(0., 0., 1., 1.), 0., 10.).is_err());
    }

    #[test]
    fn encode_pairs_shape_and_scalar_agreement() {
        let a = vec![bx(0., 0., 10., 10.), bx(5., 5., 20., 25.), bx(30., 1., 40., 9.)];
        let b = vec![bx(1., 1., 9., 9.), bx(50., 50., 60., 70.), bx(0., 0., 100., 80.), bx(2., 3., 4., 5.)];
        let t = encode_pairs(&a, &b, 100., 80.).unwrap();
        assert_eq!(t.shape(), &[3, 4, 16]);
        let single = spatial_encoding(&a[1], &b[2], 100., 80.).unwrap();
        assert_eq!(&t.data()[(4 + 2) * 16..(4 + 3) * 16], &single);
        let one = encode_pairs(&a[..1], &b[..1], 100., 80.).unwrap();
        assert_eq!(one.data(), &spatial_encoding(&a[0], &b[0], 100., 80.).unwrap());
    }

    #[test]
    fn swapping_pair_swaps_blocks_and_deltas() {
        let a = bx(10., 10., 30., 20.);
        let b = bx(25., 12., 45., 40.);
        let ab = spatial_encoding(&a, &b, 100., 80.).unwrap();
        let ba = spatial_encoding(&b, &a, 100., 80.).unwrap();
        assert_eq!(&ab[..6], &ba[6..12]);
        assert_eq!(&ab[6..12], &ba[..6]);
        assert_eq!(ab[12], ba[12]);
        assert_eq!(ab[15], ba[15]);
        // deltas flip sign and are re-normalised by the other box
        assert!((ab[13] * a.width() + ba[13] * b.width()).abs() < 1e-12);
        assert!((ab[14] * a.height() + ba[14] * b.height()).abs() < 1e-12);
        assert!(ab[13] > 0.0 && ba[13] < 0.0);
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..60.0f64, 0.0..40.0f64, 1.0..30.0f64, 1.0..30.0f64)
            .prop_map(|(x, y, w, h)| bx(x.floor(), y.floor(), (x + w).floor() + 1.0, (y + h).floor() + 1.0))
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            prop_assert_eq!(ab, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(ab == 0.0, intersection(&a, &b) == 0.0);
            prop_assert_eq!(ab == 1.0, a == b);
        }

        #[test]
        fn translation_splits_invariant_and_absolute_parts(
            a in arb_box(), b in arb_box(), dx in 1i32..20, dy in 1i32..20
        ) {
            let (w, h) = (200.0, 160.0);
            let e = spatial_encoding(&a, &b, w, h).unwrap();
            let t = spatial_encoding(&a.translate(dx as f64, dy as f64), &b.translate(dx as f64, dy as f64), w, h).unwrap();
            // pairwise block and sizes are invariant
            prop_assert!((e[12] - t[12]).abs() < 1e-12);
            prop_assert!((e[13] - t[13]).abs() < 1e-12);
            prop_assert!((e[14] - t[14]).abs() < 1e-12);
            prop_assert!((e[15] - t[15]).abs() < 1e-12);
            for i in [2, 3, 4, 5, 8, 9, 10, 11] {
                prop_assert!((e[i] - t[i]).abs() < 1e-12);
            }
            // absolute centres move
            prop_assert!(e[0] != t[0] && e[1] != t[1] && e[6] != t[6] && e[7] != t[7]);
        }

        #[test]
        fn normalised_entries_in_unit_range(a in arb_box(), b in arb_box()) {
            let e = spatial_encoding(&a, &b, 100.0, 80.0).unwrap();
            for i in [0, 1, 2, 3, 4, 6, 7, 8, 9, 10, 12, 15] {
                prop_assert!((0.0..=1.0).contains(&e[i]), "entry {} = {}", i, e[i]);
            }
        }

        #[test]
        fn nms_output_subset_without_overlaps(
            boxes in proptest::collection::vec((arb_box(), 0usize..2, 0.0..1.0f64), 0..12)
        ) {
            let dets: Vec<Detection> = boxes.iter().map(|&(b, c, s)| det(c, b, s)).collect();
            let kept = nms(&dets, 0.5);
            for k in &kept {
                prop_assert!(dets.contains(k));
            }
            for (i, x) in kept.iter().enumerate() {
                for y in &kept[i + 1..] {
                    if x.category == y.category {
                        prop_assert!(iou(&x.bbox, &y.bbox) < 0.5);
                    }
                }
            }
        }
    }
}
