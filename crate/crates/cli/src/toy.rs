//! Seeded stand-in for a transformer's per-layer query/key/value projections.
//!
//! Every token id owns an embedding made of three blocks: a low-rank shared
//! block with a decaying spectrum, and two high-variance nuisance blocks. The
//! query map sends the shared block and the first nuisance block to
//! orthogonal subspaces of `R^{d_H}`; the key map sends the shared block and
//! the second nuisance block. The two nuisance subspaces are orthogonal to
//! each other and to the shared one, so `q·k` depends on the shared block
//! only, while most of the variance of either side lies elsewhere.

use esa_core::tensor::{dot, seeded_rng, SeededRng};
use esa_core::{CalibrationSet, Matrix};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocabulary: usize,
    /// Rank of the score-carrying block.
    pub shared_rank: usize,
    /// Scale of the first shared coordinate.
    pub shared_scale: f32,
    /// Per-coordinate decay of the shared block's scale.
    pub shared_decay: f32,
    /// Width of each nuisance block.
    pub nuisance_rank: usize,
    pub nuisance_std: f32,
    pub seed: u64,
}

impl ToyModelSpec {
    pub fn d_model(&self) -> usize {
        self.heads * self.head_dim
    }

    fn embed_dim(&self) -> usize {
        self.shared_rank + 2 * self.nuisance_rank
    }
}

/// Token stream with repeated motifs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub motifs: usize,
    pub motif_len: usize,
    /// Chance that a motif starts at a given position.
    pub motif_rate: f64,
    /// Per-occurrence Gaussian jitter added to embeddings.
    pub jitter: f32,
    pub seed: u64,
}

/// Projection weights of one layer.
#[derive(Debug, Clone)]
pub struct ToyLayer {
    pub index: usize,
    w_q: Matrix,
    w_k: Matrix,
    w_v: Matrix,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    pub spec: ToyModelSpec,
    embeddings: Matrix,
    pub layers: Vec<ToyLayer>,
}

/// Raw queries, keys and values of one layer for a token range.
#[derive(Debug, Clone)]
pub struct LayerStream {
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
}

fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut SeededRng) -> Matrix {
    Matrix::random_normal(rows, cols, std, rng)
}

/// `n` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussian draws).
fn orthonormal_columns(dim: usize, n: usize, rng: &mut SeededRng) -> Vec<Vec<f32>> {
    assert!(
        n <= dim,
        "cannot fit {n} orthonormal vectors in {dim} dimensions"
    );
    let mut basis: Vec<Vec<f32>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let p = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm > 1e-3 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

/// `d_H × e` map writing `blocks[i] = (basis vectors, mixing matrix, input offset)`.
fn assemble(d_model: usize, embed: usize, blocks: &[(&[Vec<f32>], &Matrix, usize)]) -> Matrix {
    let mut w = Matrix::zeros(d_model, embed);
    for (basis, mix, offset) in blocks {
        // column `offset + c` of W is Σ_j basis[j] · mix[j][c]
        for c in 0..mix.cols() {
            for (j, b) in basis.iter().enumerate() {
                let m = mix.get(j, c);
                for (r, x) in b.iter().enumerate() {
                    let cur = w.get(r, offset + c);
                    w.set(r, offset + c, cur + m * x);
                }
            }
        }
    }
    w
}

impl ToyModel {
    pub fn new(spec: &ToyModelSpec) -> Self {
        let d = spec.d_model();
        let (r, m) = (spec.shared_rank, spec.nuisance_rank);
        assert!(r + 2 * m <= d, "toy subspaces exceed d_H");
        let mut rng = seeded_rng(spec.seed);
        let e = spec.embed_dim();
        let mut embeddings = Matrix::zeros(spec.vocabulary, e);
        for t in 0..spec.vocabulary {
            let row = embeddings.row_mut(t);
            for (c, x) in row.iter_mut().enumerate() {
                let z: f32 = StandardNormal.sample(&mut rng);
                let scale = if c < r {
                    spec.shared_scale * spec.shared_decay.powi(c as i32)
                } else {
                    spec.nuisance_std
                };
                *x = z * scale;
            }
        }
        let mix_std = 1.0 / (r as f32).sqrt();
        let layers = (0..spec.layers)
            .map(|index| {
                let basis = orthonormal_columns(d, r + 2 * m, &mut rng);
                let (shared, rest) = basis.split_at(r);
                let (q_only, k_only) = rest.split_at(m);
                let a_q = gaussian(r, r, mix_std, &mut rng);
                let a_k = gaussian(r, r, mix_std, &mut rng);
                let eye = Matrix::identity(m);
                let w_q = assemble(d, e, &[(shared, &a_q, 0), (q_only, &eye, r)]);
                let w_k = assemble(d, e, &[(shared, &a_k, 0), (k_only, &eye, r + m)]);
                let w_v = gaussian(d, e, 1.0 / (e as f32).sqrt(), &mut rng);
                ToyLayer {
                    index,
                    w_q,
                    w_k,
                    w_v,
                }
            })
            .collect();
        ToyModel {
            spec: spec.clone(),
            embeddings,
            layers,
        }
    }

    /// Token ids `start..start + len` of the corpus stream.
    pub fn tokens(&self, corpus: &CorpusSpec, start: usize, len: usize) -> Vec<usize> {
        // The stream is generated from position 0 so every slice is a window
        // of one fixed sequence.
        let mut rng = seeded_rng(corpus.seed);
        let vocab = self.spec.vocabulary;
        let motifs: Vec<Vec<usize>> = (0..corpus.motifs)
            .map(|_| {
                (0..corpus.motif_len)
                    .map(|_| rng.random_range(0..vocab))
                    .collect()
            })
            .collect();
        let mut out = Vec::with_capacity(start + len);
        while out.len() < start + len {
            if !motifs.is_empty() && rng.random_bool(corpus.motif_rate) {
                let m = &motifs[rng.random_range(0..motifs.len())];
                out.extend_from_slice(m);
            } else {
                out.push(rng.random_range(0..vocab));
            }
        }
        out.truncate(start + len);
        out.split_off(start)
    }

    /// Embeddings with per-position jitter for positions `start..start + len`.
    fn embed(&self, corpus: &CorpusSpec, start: usize, len: usize) -> Matrix {
        let ids = self.tokens(corpus, start, len);
        let e = self.spec.embed_dim();
        let mut out = Matrix::zeros(len, e);
        for (i, id) in ids.iter().enumerate() {
            let mut rng =
                seeded_rng(corpus.seed ^ ((start + i) as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            for (c, x) in out.row_mut(i).iter_mut().enumerate() {
                let z: f32 = StandardNormal.sample(&mut rng);
                *x = self.embeddings.get(*id, c) + corpus.jitter * z;
            }
        }
        out
    }

    pub fn layer_stream(
        &self,
        layer: usize,
        corpus: &CorpusSpec,
        start: usize,
        len: usize,
    ) -> LayerStream {
        let x = self.embed(corpus, start, len);
        let l = &self.layers[layer];
        LayerStream {
            queries: x.matmul_t(&l.w_q).expect("toy shapes"),
            keys: x.matmul_t(&l.w_k).expect("toy shapes"),
            values: x.matmul_t(&l.w_v).expect("toy shapes"),
        }
    }

    pub fn calibration(
        &self,
        layer: usize,
        corpus: &CorpusSpec,
        start: usize,
        len: usize,
    ) -> esa_core::Result<CalibrationSet> {
        let s = self.layer_stream(layer, corpus, start, len);
        CalibrationSet::new(
            layer,
            s.queries,
            s.keys,
            format!("toy layer {layer} positions {start}..{}", start + len),
        )
    }
}
