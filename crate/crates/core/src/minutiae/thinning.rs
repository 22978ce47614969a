use ndarray::Array2;

/// Neighbors `P2..P9` clockwise from north: N, NE, E, SE, S, SW, W, NW.
pub const NEIGHBORS: [(isize, isize); 8] = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)];

#[inline]
pub fn neighbor_values(img: &Array2<bool>, y: usize, x: usize) -> [bool; 8] {
    let (h, w) = img.dim();
    let mut out = [false; 8];
    for (i, (dy, dx)) in NEIGHBORS.iter().enumerate() {
        let yy = y as isize + dy;
        let xx = x as isize + dx;
        out[i] = yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w && img[[yy as usize, xx as usize]];
    }
    out
}

/// Zhang-Suen parallel thinning to a one-pixel-wide, 8-connected skeleton.
pub fn zhang_suen(binary: &Array2<bool>) -> Array2<bool> {
    let mut img = binary.clone();
    let (h, w) = img.dim();
    let mut to_clear = Vec::new();
    loop {
        let mut changed = false;
        for pass in 0..2 {
            to_clear.clear();
            for y in 0..h {
                for x in 0..w {
                    if !img[[y, x]] {
                        continue;
                    }
                    let p = neighbor_values(&img, y, x);
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) {
                        continue;
                    }
                    let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
                    if a != 1 {
                        continue;
                    }
                    let (p2, p4, p6, p8) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(p2 && p4 && p6) && !(p4 && p6 && p8)
                    } else {
                        !(p2 && p4 && p8) && !(p2 && p6 && p8)
                    };
                    if ok {
                        to_clear.push((y, x));
                    }
                }
            }
            if !to_clear.is_empty() {
                changed = true;
                for &(y, x) in &to_clear {
                    img[[y, x]] = false;
                }
            }
        }
        if !changed {
            break;
        }
    }
    remove_staircase_pixels(&mut img);
    img
}

/// Drops corner pixels of 2x2-thick diagonal steps that Zhang-Suen leaves
/// behind; such a pixel is removable when the skeleton stays connected
/// without it (a single 0->1 transition around it, i.e. crossing number 1 on
/// the 8-ring with its two 4-neighbours adjacent).
fn remove_staircase_pixels(img: &mut Array2<bool>) {
    let (h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            if !img[[y, x]] {
                continue;
            }
            let p = neighbor_values(img, y, x);
            let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
            let corner = (n && e && !s && !wst && !p[5])
                || (e && s && !n && !wst && !p[7])
                || (s && wst && !n && !e && !p[1])
                || (wst && n && !e && !s && !p[3]);
            let b = p.iter().filter(|&&v| v).count();
            let a = (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count();
            if corner && a == 1 && b >= 2 && b <= 3 {
                img[[y, x]] = false;
            }
        }
    }
}
