//! Image to token conversion and its exact inverse.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::join;
use crate::tensor::Tensor;

/// Non-overlapping `L×L` tiles of an `H×W×C` image, row-major tile order,
/// each flattened row-major to `[L², C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub tiles: Vec<Tensor>,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

impl Patches {
    /// All tiles stacked into `[N·L², C]` rows.
    pub fn to_rows(&self) -> Tensor {
        let c = self.tiles[0].shape()[1];
        let rows = self.tiles.len() * self.patch * self.patch;
        let data = self.tiles.iter().flat_map(|t| t.data().iter().copied()).collect();
        Tensor::from_parts(vec![rows, c], data)
    }
}

/// Embedded patch tokens, `[N, L², C']`, with their image provenance.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    pub channels: usize,
}

impl TokenGrid {
    /// Wraps an existing `[N, L², C']` variable, checking it against the
    /// image geometry.
    pub fn new(tape: &Tape, tokens: Var, height: usize, width: usize, patch: usize) -> Result<Self> {
        check_divisible(height, width, patch)?;
        let n = height * width / (patch * patch);
        let shape = tape.shape(tokens);
        if shape.len() != 3 || shape[0] != n || shape[1] != patch * patch {
            return Err(Error::shape("token_grid", shape, &[n, patch * patch]));
        }
        Ok(Self {
            tokens,
            height,
            width,
            patch,
            channels: shape[2],
        })
    }

    pub fn patches(&self) -> usize {
        self.height * self.width / (self.patch * self.patch)
    }

    pub fn positions(&self) -> usize {
        self.patch * self.patch
    }

    /// `T = N·L²`.
    pub fn token_count(&self) -> usize {
        self.height * self.width
    }

    /// Same provenance, different token variable.
    pub fn with_tokens(&self, tokens: Var) -> Self {
        Self { tokens, ..*self }
    }

    pub fn as_rows(&self, tape: &mut Tape) -> Result<Var> {
        tape.reshape(self.tokens, &[self.token_count(), self.channels])
    }

    /// Reshapes `[T, C']` rows back into this grid's layout.
    pub fn from_rows(&self, tape: &mut Tape, rows: Var) -> Result<Self> {
        let c = *tape.shape(rows).last().unwrap_or(&0);
        let tokens = tape.reshape(rows, &[self.patches(), self.positions(), c])?;
        Ok(Self {
            tokens,
            channels: c,
            ..*self
        })
    }
}

/// Linear patch embedding and additive learnable position table.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedWeights<P = Tensor> {
    /// `[C, C']`
    pub embed: P,
    /// `[N, L², C']`
    pub pos: P,
}

impl PatchEmbedWeights<Tensor> {
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        channels: usize,
        patches: usize,
        positions: usize,
        rng: &mut R,
    ) -> Self {
        let embed = Tensor::uniform(&[in_channels, channels], 1.0 / (in_channels as f64).sqrt(), rng);
        let pos = Tensor::uniform(&[patches, positions, channels], 0.02, rng);
        Self { embed, pos }
    }
}

impl<P> PatchEmbedWeights<P> {
    pub fn map<Q>(&self, prefix: &str, f: &mut dyn FnMut(&str, &P) -> Q) -> PatchEmbedWeights<Q> {
        PatchEmbedWeights {
            embed: f(&join(prefix, "embed"), &self.embed),
            pos: f(&join(prefix, "pos"), &self.pos),
        }
    }
}

fn check_divisible(height: usize, width: usize, patch: usize) -> Result<()> {
    if patch == 0 || height == 0 || width == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(Error::Config(format!(
            "image {height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok(())
}

pub fn partition(image: &Tensor, patch: usize) -> Result<Patches> {
    if image.ndim() != 3 {
        return Err(Error::InvalidTensor(format!(
            "partition expects an HxWxC image, got {:?}",
            image.shape()
        )));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    check_divisible(h, w, patch)?;
    let src = image.data();
    let mut tiles = Vec::with_capacity(h * w / (patch * patch));
    for ti in 0..h / patch {
        for tj in 0..w / patch {
            let mut data = Vec::with_capacity(patch * patch * c);
            for y in 0..patch {
                let row = (ti * patch + y) * w + tj * patch;
                data.extend_from_slice(&src[row * c..(row + patch) * c]);
            }
            tiles.push(Tensor::from_parts(vec![patch * patch, c], data));
        }
    }
    Ok(Patches {
        tiles,
        height: h,
        width: w,
        patch,
    })
}

/// `X_n = P_n · embed + pos_n` for every patch.
pub fn embed_and_position(tape: &mut Tape, patches: &Patches, weights: &PatchEmbedWeights<Var>) -> Result<TokenGrid> {
    let c_in = patches.tiles[0].shape()[1];
    let embed_shape = tape.shape(weights.embed).to_vec();
    if embed_shape.len() != 2 || embed_shape[0] != c_in {
        return Err(Error::shape("embed_and_position", &[c_in], &embed_shape));
    }
    let channels = embed_shape[1];
    let (n, l2) = (patches.tiles.len(), patches.patch * patches.patch);
    let pos_shape = tape.shape(weights.pos);
    if pos_shape != [n, l2, channels] {
        return Err(Error::shape("embed_and_position", &[n, l2, channels], pos_shape));
    }
    let rows = tape.constant(patches.to_rows());
    let embedded = tape.matmul(rows, weights.embed)?;
    let embedded = tape.reshape(embedded, &[n, l2, channels])?;
    let tokens = tape.add(embedded, weights.pos)?;
    Ok(TokenGrid {
        tokens,
        height: patches.height,
        width: patches.width,
        patch: patches.patch,
        channels,
    })
}

/// Inverse of [`partition`]'s spatial arrangement for `[N, L², K]` tokens.
pub fn unpatch(tokens: &Tensor, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    check_divisible(height, width, patch)?;
    let s = tokens.shape();
    let n = height * width / (patch * patch);
    if s.len() != 3 || s[0] != n || s[1] != patch * patch {
        return Err(Error::shape("unpatch", s, &[n, patch * patch]));
    }
    let k = s[2];
    let src = tokens.data();
    let mut out = vec![0.0; height * width * k];
    let tiles_per_row = width / patch;
    for t in 0..n {
        let (ti, tj) = (t / tiles_per_row, t % tiles_per_row);
        for y in 0..patch {
            let dst = ((ti * patch + y) * width + tj * patch) * k;
            let from = (t * patch * patch + y * patch) * k;
            out[dst..dst + patch * k].copy_from_slice(&src[from..from + patch * k]);
        }
    }
    Ok(Tensor::from_parts(vec![height, width, k], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stack(p: &Patches) -> Tensor {
        let l2 = p.patch * p.patch;
        let c = p.tiles[0].shape()[1];
        p.to_rows().reshape(&[p.tiles.len(), l2, c]).unwrap()
    }

    #[test]
    fn partition_counts() {
        let img = Tensor::zeros(&[32, 32, 3]);
        let p = partition(&img, 8).unwrap();
        assert_eq!(p.tiles.len(), 16);
        assert!(p.tiles.iter().all(|t| t.shape() == [64, 3]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::uniform(&[8, 8, 2], 1.0, &mut rng);
        let p = partition(&img, 8).unwrap();
        assert_eq!(p.tiles.len(), 1);
        assert_eq!(p.tiles[0].data(), img.data());

        let err = partition(&Tensor::zeros(&[30, 32, 3]), 8).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("30x32") && msg.contains("8x8"), "{msg}");
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::uniform(&[4, 4, 3], 1.0, &mut rng);
        let patches = partition(&img, 2).unwrap();

        let mut tape = Tape::new();
        let w = PatchEmbedWeights {
            embed: tape.constant(Tensor::eye(3)),
            pos: tape.constant(Tensor::zeros(&[4, 4, 3])),
        };
        let grid = embed_and_position(&mut tape, &patches, &w).unwrap();
        assert_eq!(tape.value(grid.tokens), &stack(&patches));

        let pos = Tensor::uniform(&[4, 4, 5], 1.0, &mut rng);
        let w = PatchEmbedWeights {
            embed: tape.constant(Tensor::zeros(&[3, 5])),
            pos: tape.constant(pos.clone()),
        };
        let grid = embed_and_position(&mut tape, &patches, &w).unwrap();
        assert_eq!(tape.value(grid.tokens), &pos);

        // one pixel of value 5 through embed [[2, 3]]
        let img = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        let patches = partition(&img, 1).unwrap();
        let w = PatchEmbedWeights {
            embed: tape.constant(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap()),
            pos: tape.constant(Tensor::zeros(&[1, 1, 2])),
        };
        let grid = embed_and_position(&mut tape, &patches, &w).unwrap();
        assert_eq!(tape.value(grid.tokens).data(), &[10.0, 15.0]);

        let w = PatchEmbedWeights {
            embed: tape.constant(Tensor::zeros(&[2, 2])),
            pos: tape.constant(Tensor::zeros(&[1, 1, 2])),
        };
        assert!(embed_and_position(&mut tape, &patches, &w).is_err());
    }

    #[test]
    fn unpatch_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::uniform(&[32, 32, 3], 1.0, &mut rng);
        let p = partition(&img, 8).unwrap();
        assert!(unpatch(&stack(&p), 32, 32, 8).unwrap().bit_eq(&img));

        let flat = Tensor::full(&[4, 16, 2], 0.25);
        assert_eq!(unpatch(&flat, 8, 8, 4).unwrap(), Tensor::full(&[8, 8, 2], 0.25));

        // token n filled with n -> block (i, j) holds i * (W/L) + j
        let (h, w, l) = (8, 12, 4);
        let n = h * w / (l * l);
        let tokens = Tensor::from_fn(&[n, l * l, 1], |i| (i / (l * l)) as f64);
        let out = unpatch(&tokens, h, w, l).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect = (y / l) * (w / l) + x / l;
                assert_eq!(out.data()[y * w + x], expect as f64);
            }
        }

        assert!(unpatch(&Tensor::zeros(&[3, 16, 1]), 8, 8, 4).is_err());
    }

    #[test]
    fn embedding_is_affine_in_the_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let i1 = Tensor::uniform(&[8, 8, 3], 1.0, &mut rng);
        let i2 = Tensor::uniform(&[8, 8, 3], 1.0, &mut rng);
        let embed = Tensor::uniform(&[3, 6], 1.0, &mut rng);
        let pos = Tensor::uniform(&[4, 16, 6], 1.0, &mut rng);
        let (a, b) = (0.7, -1.3);
        let run = |img: &Tensor| {
            let mut tape = Tape::new();
            let w = PatchEmbedWeights {
                embed: tape.constant(embed.clone()),
                pos: tape.constant(pos.clone()),
            };
            let grid = embed_and_position(&mut tape, &partition(img, 4).unwrap(), &w).unwrap();
            tape.value(grid.tokens).clone()
        };
        let mix = i1.zip_map(&i2, |x, y| a * x + b * y).unwrap();
        let lhs = run(&mix);
        let (f1, f2) = (run(&i1), run(&i2));
        let rhs = Tensor::from_fn(lhs.shape(), |i| {
            a * f1.data()[i] + b * f2.data()[i] - (a + b - 1.0) * pos.data()[i]
        });
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    proptest! {
        #[test]
        fn partition_unpatch_round_trip(
            tiles_h in 1usize..5,
            tiles_w in 1usize..5,
            patch in 1usize..6,
            c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let (h, w) = (tiles_h * patch, tiles_w * patch);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = Tensor::uniform(&[h, w, c], 1.0, &mut rng);
            let p = partition(&img, patch).unwrap();
            prop_assert_eq!(p.tiles.len(), h * w / (patch * patch));
            prop_assert!(unpatch(&stack(&p), h, w, patch).unwrap().bit_eq(&img));
        }
    }
}
