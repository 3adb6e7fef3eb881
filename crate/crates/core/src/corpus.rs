//! Procedural "schematic face" corpus with binary attribute labels.

use std::io::Write;
use std::path::Path;

use gatefill_tensor::{par, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio;

pub const ATTRIBUTES: [&str; 6] = ["hat", "smile", "hair_light", "face_round", "eyes_wide", "bg_warm"];
pub const N_ATTRIBUTES: usize = ATTRIBUTES.len();

pub type Labels = [bool; N_ATTRIBUTES];

pub fn attribute_index(name: &str) -> Option<usize> {
    ATTRIBUTES.iter().position(|&a| a == name)
}

/// Seed offsets keep training and evaluation images disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1 << 40,
        }
    }
}

type Rgb = [f64; 3];

/// Scene description of one face; every coordinate is in unit image space.
#[derive(Clone, Debug, PartialEq)]
pub struct Face {
    pub labels: Labels,
    bg: Rgb,
    bg_bottom: Rgb,
    skin: Rgb,
    hair: Rgb,
    hat: Rgb,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    eye_dx: f64,
    eye_y: f64,
    eye_r: f64,
    mouth_w: f64,
    mouth_curve: f64,
    hat_h: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> Rgb {
    let h = h.rem_euclid(1.0) * 6.0;
    let i = h.floor() as i32;
    let f = h - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

impl Face {
    pub fn sample<R: Rng>(rng: &mut R) -> Self {
        let labels: Labels = std::array::from_fn(|_| rng.gen_bool(0.5));
        let [_, smile, hair_light, face_round, eyes_wide, bg_warm] = labels;
        let bg_hue = if bg_warm { rng.gen_range(-0.05..0.12) } else { rng.gen_range(0.45..0.68) };
        let bg = hsv(bg_hue, rng.gen_range(0.45..0.8), rng.gen_range(0.6..0.9));
        let bg_bottom = bg.map(|c| c * rng.gen_range(0.65..0.9));
        let skin_v = rng.gen_range(0.55..0.95);
        let skin = hsv(rng.gen_range(0.04..0.1), rng.gen_range(0.25..0.55), skin_v);
        let hair = if hair_light {
            hsv(rng.gen_range(0.1..0.16), rng.gen_range(0.4..0.7), rng.gen_range(0.85..1.0))
        } else {
            hsv(rng.gen_range(0.02..0.1), rng.gen_range(0.3..0.7), rng.gen_range(0.1..0.3))
        };
        let hat_color = hsv(rng.gen_range(0.0..1.0), rng.gen_range(0.7..1.0), rng.gen_range(0.45..0.85));
        let rx = rng.gen_range(0.22..0.27);
        let ry = if face_round { rx * rng.gen_range(0.98..1.06) } else { rx * rng.gen_range(1.3..1.42) };
        Face {
            labels,
            bg,
            bg_bottom,
            skin,
            hair,
            hat: hat_color,
            cx: 0.5 + rng.gen_range(-0.04..0.04),
            cy: 0.56 + rng.gen_range(-0.03..0.03),
            rx,
            ry,
            eye_dx: if eyes_wide { rng.gen_range(0.47..0.55) } else { rng.gen_range(0.2..0.27) },
            eye_y: rng.gen_range(-0.25..-0.12),
            eye_r: rng.gen_range(0.085..0.11),
            mouth_w: rng.gen_range(0.32..0.48),
            mouth_curve: if smile { rng.gen_range(0.16..0.24) } else { -rng.gen_range(0.16..0.24) },
            hat_h: rng.gen_range(0.2..0.27),
        }
    }

    fn color_at(&self, x: f64, y: f64) -> Rgb {
        // normalized face coordinates
        let (u, v) = ((x - self.cx) / self.rx, (y - self.cy) / self.ry);
        let r2 = u * u + v * v;
        let hat_base = self.cy - self.ry * 0.55;
        if self.labels[0] {
            let brim = (y - hat_base).abs() < 0.035 && (x - self.cx).abs() < self.rx * 1.35;
            let crown = y < hat_base && y > hat_base - self.hat_h && (x - self.cx).abs() < self.rx * 0.85;
            if brim || crown {
                return self.hat;
            }
        }
        if r2 <= 1.0 {
            let (ex, ey) = ((u.abs() - self.eye_dx) * self.rx, (v - self.eye_y) * self.ry);
            if ex * ex + ey * ey < (self.eye_r * self.rx).powi(2) {
                return [0.05, 0.05, 0.08];
            }
            // mouth: parabola v = mouth_v + curve * (u / w)^2, drawn as a thick line
            let t = u / self.mouth_w;
            if t.abs() <= 1.0 {
                let mv = 0.42 - self.mouth_curve * (1.0 - t * t);
                if ((v - mv) * self.ry).abs() < 0.022 {
                    return [0.55, 0.1, 0.12];
                }
            }
            return self.skin;
        }
        // hair: a larger ellipse behind the head, shifted upward
        let (hu, hv) = ((x - self.cx) / (self.rx * 1.18), (y - self.cy + self.ry * 0.18) / (self.ry * 1.1));
        if hu * hu + hv * hv <= 1.0 && y < self.cy + self.ry * 0.35 {
            return self.hair;
        }
        let mix = y.clamp(0.0, 1.0);
        std::array::from_fn(|c| self.bg[c] * (1.0 - mix) + self.bg_bottom[c] * mix)
    }

    /// Renders `[3, size, size]` in [-1, 1] with 4x4 supersampling.
    pub fn render(&self, size: usize) -> Tensor<f32> {
        const SS: usize = 4;
        let plane = size * size;
        let mut data = vec![0f32; 3 * plane];
        for py in 0..size {
            for px in 0..size {
                let mut acc = [0.0; 3];
                for sy in 0..SS {
                    for sx in 0..SS {
                        let x = (px as f64 + (sx as f64 + 0.5) / SS as f64) / size as f64;
                        let y = (py as f64 + (sy as f64 + 0.5) / SS as f64) / size as f64;
                        let c = self.color_at(x, y);
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                    }
                }
                for k in 0..3 {
                    let v = acc[k] / (SS * SS) as f64;
                    data[k * plane + py * size + px] = (v * 2.0 - 1.0).clamp(-1.0, 1.0) as f32;
                }
            }
        }
        Tensor::from_vec(&[3, size, size], data).expect("render dims")
    }
}

/// Face number `index` of a split; any index is reachable without drawing the others.
pub fn face(seed: u64, split: Split, index: u64) -> Face {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream() + index);
    Face::sample(&mut rng)
}

/// Images `start..start + n` of a split as `[n, 3, R, R]` plus their labels.
pub fn batch(seed: u64, split: Split, start: u64, n: usize, size: usize) -> (Tensor<f32>, Vec<Labels>) {
    let items = par::map_range(n, |i| {
        let f = face(seed, split, start + i as u64);
        (f.render(size), f.labels)
    });
    let labels = items.iter().map(|(_, l)| *l).collect();
    let imgs: Vec<Tensor<f32>> = items.into_iter().map(|(t, _)| t).collect();
    (Tensor::stack(&imgs).expect("uniform renders"), labels)
}

/// Arbitrary images of a split, in the order of `indices`.
pub fn gather(seed: u64, split: Split, indices: &[u64], size: usize) -> (Tensor<f32>, Vec<Labels>) {
    let items = par::map_range(indices.len(), |i| {
        let f = face(seed, split, indices[i]);
        (f.render(size), f.labels)
    });
    let labels = items.iter().map(|(_, l)| *l).collect();
    let imgs: Vec<Tensor<f32>> = items.into_iter().map(|(t, _)| t).collect();
    (Tensor::stack(&imgs).expect("uniform renders"), labels)
}

/// Writes `n` PNGs and an `attributes.tsv` sidecar into `dir`.
pub fn write_corpus(dir: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let table_path = dir.join("attributes.tsv");
    let mut table = std::fs::File::create(&table_path).map_err(|e| Error::io(&table_path, e))?;
    let header = format!("filename\t{}\n", ATTRIBUTES.join("\t"));
    table.write_all(header.as_bytes()).map_err(|e| Error::io(&table_path, e))?;
    const CHUNK: usize = 256;
    for start in (0..n).step_by(CHUNK) {
        let len = CHUNK.min(n - start);
        let (imgs, labels) = batch(seed, Split::Train, start as u64, len, size);
        for (i, l) in labels.iter().enumerate() {
            let name = format!("face_{:06}.png", start + i);
            imageio::write_png(&dir.join(&name), &imgs.narrow0(i, 1).reshape(&[3, size, size])?)?;
            let cols: Vec<&str> = l.iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(table, "{name}\t{}", cols.join("\t")).map_err(|e| Error::io(&table_path, e))?;
        }
    }
    Ok(())
}

/// Reads an `attributes.tsv` written by [`write_corpus`].
pub fn read_attributes(path: &Path) -> Result<Vec<(String, Labels)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (no, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != N_ATTRIBUTES + 1 {
            return Err(Error::Config(format!("{}:{}: expected {} columns", path.display(), no + 1, N_ATTRIBUTES + 1)));
        }
        let labels: Labels = std::array::from_fn(|k| cols[k + 1] == "1");
        rows.push((cols[0].to_string(), labels));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_in_range() {
        let (a, la) = batch(7, Split::Train, 10, 4, 32);
        let (b, lb) = batch(7, Split::Train, 10, 4, 32);
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let (c, _) = batch(7, Split::Eval, 10, 4, 32);
        assert_ne!(a, c);
    }

    #[test]
    fn hat_changes_the_top_of_the_image() {
        let mut f = face(1, Split::Train, 0);
        f.labels[0] = false;
        let bare = f.render(32);
        f.labels[0] = true;
        let hat = f.render(32);
        let top: f32 = (0..3 * 32 * 32)
            .filter(|i| (i % (32 * 32)) / 32 < 14)
            .map(|i| (bare.data()[i] - hat.data()[i]).abs())
            .sum();
        assert!(top > 10.0, "hat should paint the upper region, diff {top}");
    }

    #[test]
    fn corpus_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 3, 32, 5).unwrap();
        let rows = read_attributes(&dir.path().join("attributes.tsv")).unwrap();
        assert_eq!(rows.len(), 3);
        let (imgs, labels) = batch(5, Split::Train, 0, 3, 32);
        assert_eq!(rows[2].1, labels[2]);
        let back: Tensor<f32> = imageio::read_png(&dir.path().join(&rows[1].0)).unwrap();
        let orig = imgs.narrow0(1, 1).reshape(&[3, 32, 32]).unwrap();
        assert!(back.max_abs_diff(&orig) <= 1.0 / 127.5 + 1e-6);
    }
}
