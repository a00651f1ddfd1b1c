//! Side-by-side ground-truth / prediction panels as binary PPM.

use anyhow::{bail, Result};
use fireseg::dataset::{FIRE, NO_FIRE, WATER};

pub const BLACK: [u8; 3] = [0, 0, 0];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];
pub const ORANGE: [u8; 3] = [255, 165, 0];
pub const MAGENTA: [u8; 3] = [255, 0, 255];
/// Gutter between the two panels.
pub const WHITE: [u8; 3] = [255, 255, 255];

const GUTTER: usize = 2;

/// Colour of a ground-truth pixel.
pub fn truth_color(label: u8) -> [u8; 3] {
    match label {
        FIRE => RED,
        NO_FIRE => BLACK,
        _ => BLUE,
    }
}

/// Colour of a predicted pixel given its truth: correct pixels use the
/// truth palette, false positives are orange and false negatives magenta.
pub fn prediction_color(truth: u8, pred: u8) -> [u8; 3] {
    match (truth, pred) {
        (WATER, _) => BLUE,
        (NO_FIRE, FIRE) => ORANGE,
        (FIRE, NO_FIRE) => MAGENTA,
        (t, _) => truth_color(t),
    }
}

/// `truth | prediction`, each `h × w`, every pixel drawn as a
/// `scale × scale` block.
pub fn render_pair(h: usize, w: usize, truth: &[u8], pred: &[u8], scale: usize) -> Result<Vec<u8>> {
    if truth.len() != h * w || pred.len() != h * w {
        bail!(
            "render: expected {} labels, got {} and {}",
            h * w,
            truth.len(),
            pred.len()
        );
    }
    if scale == 0 || h == 0 || w == 0 {
        bail!("render: empty image");
    }
    let (ph, pw) = (h * scale, w * scale);
    let width = 2 * pw + GUTTER;
    let mut out = format!("P6\n{width} {ph}\n255\n").into_bytes();
    out.reserve(width * ph * 3);
    for y in 0..ph {
        let row = (y / scale) * w;
        for x in 0..pw {
            out.extend_from_slice(&truth_color(truth[row + x / scale]));
        }
        for _ in 0..GUTTER {
            out.extend_from_slice(&WHITE);
        }
        for x in 0..pw {
            let i = row + x / scale;
            out.extend_from_slice(&prediction_color(truth[i], pred[i]));
        }
    }
    Ok(out)
}
