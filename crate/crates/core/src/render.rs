//! Kernel visualization.

use crate::image::ColorImage;
use crate::quat::QuatKernel;

const GAP_COLOR: [f64; 3] = [0.0, 0.0, 0.3];

fn diverging(a: f64) -> [f64; 3] {
    let a = a.clamp(-1.0, 1.0);
    if a >= 0.0 {
        [0.5 + 0.5 * a, 0.5 - 0.5 * a, 0.5 - 0.5 * a]
    } else {
        [0.5 + 0.5 * a, 0.5 + 0.5 * a, 0.5 - 0.5 * a]
    }
}

/// Renders `Q0..Q3` side by side, each tap as a `cell x cell` block with a
/// one-cell gap. `Q0` is black to white up to its maximum; `Q1..Q3` share
/// a red/blue diverging scale centered on mid-gray.
pub fn render_kernel(k: &QuatKernel, cell: usize) -> ColorImage {
    let cell = cell.max(1);
    let s = k.size();
    let tile = s * cell;
    let cols = 4 * tile + 3 * cell;
    let q0_max = k.component(0).iter().copied().fold(0.0, f64::max);
    let signed_max = k.parts()[1..].iter().flat_map(|p| p.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
    ColorImage::from_fn(tile, cols, |c, r, x| {
        let t = x / (tile + cell);
        let off = x % (tile + cell);
        if off >= tile {
            return GAP_COLOR[c];
        }
        let v = k.component(t)[[r / cell, off / cell]];
        if t == 0 {
            if q0_max > 0.0 {
                (v / q0_max).clamp(0.0, 1.0)
            } else {
                0.0
            }
        } else if signed_max > 0.0 {
            diverging(v / signed_max)[c]
        } else {
            0.5
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::to_rgb8;

    #[test]
    fn identity_kernel_view() {
        let img = to_rgb8(&render_kernel(&QuatKernel::identity(3), 2));
        assert_eq!((img.width(), img.height()), (4 * 6 + 3 * 2, 6));
        let bright: Vec<_> = (0..6).flat_map(|y| (0..6).map(move |x| (x, y))).filter(|&(x, y)| img.get_pixel(x, y)[0] == 255).collect();
        assert_eq!(bright, vec![(2, 2), (3, 2), (2, 3), (3, 3)]);
        for t in 1..4u32 {
            let x0 = t * 8;
            for y in 0..6 {
                for x in x0..x0 + 6 {
                    assert_eq!(img.get_pixel(x, y).0, [128, 128, 128]);
                }
            }
        }
    }

    #[test]
    fn signed_components_use_both_ends() {
        let mut k = QuatKernel::identity(3);
        k.component_mut(1)[[0, 0]] = 0.2;
        k.component_mut(3)[[2, 2]] = -0.2;
        let img = render_kernel(&k, 1);
        assert_eq!([img.channel(0)[[0, 4]], img.channel(2)[[0, 4]]], [1.0, 0.0]);
        assert_eq!([img.channel(0)[[2, 14]], img.channel(2)[[2, 14]]], [0.0, 1.0]);
    }
}
