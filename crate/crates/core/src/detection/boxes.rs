//! Box regression coding: centre offsets relative to the proposal size and
//! log-space size ratios, all with unit weights.

use crate::geometry::BoundingBox;

/// Upper bound on decoded log-size deltas (avoids `exp` overflow).
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn encode(proposal: &BoundingBox, target: &BoundingBox) -> [f64; 4] {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let (gx, gy) = target.center();
    [
        (gx - px) / pw,
        (gy - py) / ph,
        (target.width() / pw).ln(),
        (target.height() / ph).ln(),
    ]
}

pub fn decode(proposal: &BoundingBox, d: &[f64]) -> BoundingBox {
    let (pw, ph) = (proposal.width(), proposal.height());
    let (px, py) = proposal.center();
    let cx = px + d[0] * pw;
    let cy = py + d[1] * ph;
    let w = pw * d[2].min(MAX_LOG_DELTA).exp();
    let h = ph * d[3].min(MAX_LOG_DELTA).exp();
    BoundingBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_deltas_return_the_proposal() {
        let p = BoundingBox::new(3.0, 4.0, 20.0, 11.5);
        let d = decode(&p, &[0.0; 4]);
        for (a, b) in d.to_array().iter().zip(p.to_array()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_encoding() {
        let p = BoundingBox::new(0.0, 0.0, 10.0, 10.0);
        let g = BoundingBox::new(5.0, 0.0, 25.0, 5.0);
        let d = encode(&p, &g);
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!((d[1] + 0.25).abs() < 1e-12);
        assert!((d[2] - 2f64.ln()).abs() < 1e-12);
        assert!((d[3] - 0.5f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(
            x in 0.0..100.0f64, y in 0.0..100.0f64, w in 1.0..50.0f64, h in 1.0..50.0f64,
            gx in 0.0..100.0f64, gy in 0.0..100.0f64, gw in 1.0..50.0f64, gh in 1.0..50.0f64,
        ) {
            let p = BoundingBox::new(x, y, x + w, y + h);
            let g = BoundingBox::new(gx, gy, gx + gw, gy + gh);
            let back = decode(&p, &encode(&p, &g));
            for (a, b) in back.to_array().iter().zip(g.to_array()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
