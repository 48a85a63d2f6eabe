use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{ScenarioConfig, SnippetLayout};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::numeric::Tensor;

const OCCLUDER: [f64; 3] = [0.62, 0.58, 0.55];
/// Tissue around a touching tip is darkened within this radius.
const DENT_RADIUS: f64 = 7.0;
const DENT_SHADE: f64 = 0.55;
/// Instrument pixels this close to a touching tip take the contact colour.
const TIP_RADIUS: f64 = 6.0;
const TIP_CONTACT: [f64; 3] = [0.97, 0.97, 0.9];
/// Length fraction of the central instrument band.
const BAND: f64 = 0.4;
/// A pressed tissue shows a pale ring between these normalised radii.
const RING: (f64, f64) = (0.3, 0.7);
const RING_MIX: f64 = 0.6;

fn dented(layout: &SnippetLayout, f: usize, x: f64, y: f64) -> bool {
    layout.instruments.iter().any(|ins| {
        ins.contacts[f].is_some_and(|(tx, ty)| (x - tx).powi(2) + (y - ty).powi(2) <= DENT_RADIUS * DENT_RADIUS)
    })
}

fn pressed(layout: &SnippetLayout, f: usize, tissue: usize) -> bool {
    layout
        .instruments
        .iter()
        .any(|ins| ins.contacts[f].is_some() && ins.target.as_ref().is_some_and(|(t, _)| *t == tissue))
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Body colour, shared by the look-alike pair `{2k, 2k + 1}`.
pub(crate) fn instrument_color(cat: usize, n: usize) -> [f64; 3] {
    let pairs = n.div_ceil(2);
    hsv((cat / 2) as f64 / pairs as f64, 0.45, 0.95)
}

/// Colour of the central band that tells the members of a pair apart.
pub(crate) fn instrument_band(cat: usize) -> [f64; 3] {
    if cat.is_multiple_of(2) {
        [0.12, 0.12, 0.35]
    } else {
        [0.95, 0.8, 0.1]
    }
}

/// Middle part of the bar, along its long axis.
fn in_band(b: &BoundingBox, x: f64, y: f64) -> bool {
    let (cx, cy) = b.center();
    if b.width() >= b.height() {
        (x - cx).abs() <= BAND * b.width() / 2.0
    } else {
        (y - cy).abs() <= BAND * b.height() / 2.0
    }
}

pub(crate) fn tissue_color(cat: usize, n: usize) -> [f64; 3] {
    hsv((cat as f64 + 0.5) / n as f64, 0.7, 0.7)
}

fn covers(b: &BoundingBox, x: f64, y: f64) -> bool {
    x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2
}

/// Renders frame `f` (0 = oldest) of a layout; pixel values are quantised to 8 bits.
pub(super) fn render_frame(cfg: &ScenarioConfig, layout: &SnippetLayout, f: usize, rng: &mut impl Rng) -> Tensor {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = Tensor::zeros(&[3, h, w]);
    let noise = (cfg.noise_std > 0.0).then(|| Normal::new(0.0, cfg.noise_std).expect("noise std validated"));
    let data = img.data_mut();
    for py in 0..h {
        for px in 0..w {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let shade = y / h as f64;
            let mut c = [0.32 + 0.08 * shade, 0.10 + 0.04 * shade, 0.08];
            for (ti, t) in layout.tissues.iter().enumerate() {
                let (cx, cy) = t.bbox.center();
                let (rx, ry) = (t.bbox.width() / 2.0, t.bbox.height() / 2.0);
                let rho = ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2);
                if rho <= 1.0 {
                    let base = tissue_color(t.category, cfg.num_tissues);
                    c = base.map(|v| v * (1.0 - 0.25 * rho));
                    if (RING.0..=RING.1).contains(&rho) && pressed(layout, f, ti) {
                        c = c.map(|v| v + (1.0 - v) * RING_MIX);
                    }
                    if dented(layout, f, x, y) {
                        c = c.map(|v| v * DENT_SHADE);
                    }
                }
            }
            for ins in &layout.instruments {
                if covers(&ins.boxes[f], x, y) {
                    let touching = ins.contacts[f].is_some_and(|(tx, ty)| (x - tx).powi(2) + (y - ty).powi(2) <= TIP_RADIUS * TIP_RADIUS);
                    c = if touching {
                        TIP_CONTACT
                    } else if in_band(&ins.boxes[f], x, y) {
                        instrument_band(ins.category)
                    } else {
                        instrument_color(ins.category, cfg.num_instruments)
                    };
                }
            }
            for o in layout.occlusions.iter().filter(|o| o.frame == f) {
                if covers(&o.rect, x, y) {
                    c = OCCLUDER;
                }
            }
            for (ch, v) in c.iter().enumerate() {
                let n = noise.as_ref().map_or(0.0, |d| d.sample(rng));
                data[(ch * h + py) * w + px] = quantize(v + n);
            }
        }
    }
    img
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

pub fn save_frame_png(img: &Tensor, path: &Path) -> Result<()> {
    let [c, h, w] = img.shape()[..] else {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("expected [3, H, W], got {:?}", img.shape()),
        });
    };
    if c != 3 {
        return Err(Error::Image {
            path: path.into(),
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let d = img.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| (d[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| Error::Image {
        path: path.into(),
        msg: e.to_string(),
    })
}

pub fn load_frame_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let d = t.data_mut();
    for (x, y, p) in img.enumerate_pixels() {
        for ch in 0..3 {
            d[(ch * h + y as usize) * w + x as usize] = p.0[ch] as f64 / 255.0;
        }
    }
    Ok(t)
}
