//! Backbone: patch embedding, transformer encoder, factor split, aggregator,
//! transformer decoder, and the two adversarial domain heads.
//!
//! One forward implementation serves student and teacher alike; which weights
//! it reads is decided by the bound parameter set, and whether gradients flow
//! is decided by how those parameters were bound (trainable vs constant).
//!
//! Token grids are (seqs * L) x width matrices; L tokens per sequence come
//! from space-to-depth patchification of the latent grid, z-major.

use meduet_tensor::{Tape, TensorId};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::params::{ones, trunc_normal, zeros, BoundParams, ParamStore};
use crate::tokenizer::{cube_to_rows, rows_to_cube, LatentVolume};
use crate::{Error, Result};

/// Parameters needed to re-encode inputs into factors; the EMA teacher
/// mirrors exactly these.
pub const TEACHER_PREFIXES: &[&str] = &["embed.", "pos", "enc.", "fd."];

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelDims {
    pub c_lat: usize,
    pub latent_side: usize,
    /// Patch edge length in latent voxels.
    pub patch: usize,
    pub d_h: usize,
    pub d_c: usize,
    pub d_s: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub clf_hidden: usize,
    pub n_domains: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            c_lat: 4,
            latent_side: 8,
            patch: 4,
            d_h: 64,
            d_c: 64,
            d_s: 16,
            enc_blocks: 4,
            dec_blocks: 2,
            heads: 4,
            mlp_ratio: 4,
            clf_hidden: 64,
            n_domains: 3,
        }
    }
}

impl ModelDims {
    pub fn tokens_per_side(&self) -> usize {
        self.latent_side / self.patch
    }

    /// Tokens per volume.
    pub fn l(&self) -> usize {
        self.tokens_per_side().pow(3)
    }

    pub fn patch_dim(&self) -> usize {
        self.c_lat * self.patch.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_side == 0 || self.patch == 0 || self.latent_side % self.patch != 0 {
            return Err(Error::Config(format!(
                "latent side {} must be a positive multiple of patch {}",
                self.latent_side, self.patch
            )));
        }
        if self.d_h % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} not divisible by {} heads",
                self.d_h, self.heads
            )));
        }
        if self.d_c == 0 || self.d_s == 0 || self.n_domains < 2 {
            return Err(Error::Config(
                "factor widths must be positive and n_domains >= 2".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form scalar parameter count, used to refuse out-of-memory
    /// configurations before any allocation happens.
    pub fn param_count(&self) -> usize {
        let l = self.l();
        let pd = self.patch_dim();
        let block = |d: usize, r: usize| {
            // ln1 + qkv + proj + ln2 + mlp
            4 * d + 3 * (d * d + d) + (d * d + d) + d * r * d + r * d + r * d * d + d
        };
        let clf = |din: usize| {
            din * self.clf_hidden
                + self.clf_hidden
                + self.clf_hidden * self.clf_hidden
                + self.clf_hidden
                + self.clf_hidden * self.n_domains
                + self.n_domains
        };
        let mut n = 0;
        n += pd * self.d_h + self.d_h; // embed
        n += l * self.d_h; // pos
        n += self.enc_blocks * block(self.d_h, self.mlp_ratio);
        n += self.d_h * (self.d_c + self.d_s) + (self.d_c + self.d_s); // fd
        n += self.d_h; // mask token
        n += (self.d_c + self.d_s) * self.d_h + self.d_h; // aggregate
        n += l * self.d_h; // dec pos
        n += self.dec_blocks * block(self.d_h, self.mlp_ratio);
        n += self.d_h * pd + pd; // head
        n += clf(self.d_c) + clf(self.d_s);
        n += 2; // temperatures
        n
    }
}

/// Latent grid -> token matrix (L x patch_dim), z-major patch raster.
pub fn patchify(lat: &LatentVolume, patch: usize) -> Array2<f64> {
    cube_to_rows(&lat.data, lat.channels, lat.side, patch)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(rows: &Array2<f64>, dims: &ModelDims) -> LatentVolume {
    let data = rows_to_cube(&rows.view(), dims.c_lat, dims.latent_side, dims.patch);
    LatentVolume {
        channels: dims.c_lat,
        side: dims.latent_side,
        data,
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
}

/// Linear layer parameters: `<name>.w` and a zero `<name>.b`.
pub(crate) fn insert_linear_params(
    p: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    name: &str,
    din: usize,
    dout: usize,
) {
    p.insert(&format!("{}.w", name), trunc_normal(rng, din, dout, 0.02));
    p.insert(&format!("{}.b", name), zeros(1, dout));
}

/// Pre-LN transformer block parameters under `prefix`, the layout
/// [`Forward::block`] consumes.
pub(crate) fn insert_block_params(
    p: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
) {
    p.insert(&format!("{}.ln1.g", prefix), ones(1, d));
    p.insert(&format!("{}.ln1.b", prefix), zeros(1, d));
    insert_linear_params(p, rng, &format!("{}.attn.q", prefix), d, d);
    insert_linear_params(p, rng, &format!("{}.attn.k", prefix), d, d);
    insert_linear_params(p, rng, &format!("{}.attn.v", prefix), d, d);
    insert_linear_params(p, rng, &format!("{}.attn.o", prefix), d, d);
    p.insert(&format!("{}.ln2.g", prefix), ones(1, d));
    p.insert(&format!("{}.ln2.b", prefix), zeros(1, d));
    insert_linear_params(p, rng, &format!("{}.mlp.0", prefix), d, d * mlp_ratio);
    insert_linear_params(p, rng, &format!("{}.mlp.1", prefix), d * mlp_ratio, d);
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = dims.d_h;
        let std = 0.02;
        let lin = |p: &mut ParamStore, rng: &mut ChaCha12Rng, name: &str, din: usize, dout: usize| {
            insert_linear_params(p, rng, name, din, dout);
        };
        let block = |p: &mut ParamStore, rng: &mut ChaCha12Rng, prefix: &str| {
            insert_block_params(p, rng, prefix, d, dims.mlp_ratio);
        };

        lin(&mut p, &mut rng, "embed", dims.patch_dim(), d);
        p.insert("pos", trunc_normal(&mut rng, dims.l(), d, std));
        for i in 0..dims.enc_blocks {
            block(&mut p, &mut rng, &format!("enc.{}", i));
        }
        lin(&mut p, &mut rng, "fd", d, dims.d_c + dims.d_s);
        p.insert("mask_token", trunc_normal(&mut rng, 1, d, std));
        lin(&mut p, &mut rng, "agg", dims.d_c + dims.d_s, d);
        p.insert("dec.pos", trunc_normal(&mut rng, dims.l(), d, std));
        for i in 0..dims.dec_blocks {
            block(&mut p, &mut rng, &format!("dec.{}", i));
        }
        lin(&mut p, &mut rng, "head", d, dims.patch_dim());
        for (head, din) in [("gc", dims.d_c), ("gs", dims.d_s)] {
            lin(&mut p, &mut rng, &format!("{}.0", head), din, dims.clf_hidden);
            lin(&mut p, &mut rng, &format!("{}.1", head), dims.clf_hidden, dims.clf_hidden);
            lin(&mut p, &mut rng, &format!("{}.2", head), dims.clf_hidden, dims.n_domains);
        }
        p.insert("alpha_c", Array2::from_elem((1, 1), 2.0));
        p.insert("alpha_s", Array2::from_elem((1, 1), 2.0));

        debug_assert_eq!(p.n_scalars(), dims.param_count());
        Self { dims, params: p }
    }

    /// Fresh teacher mirror of the re-encoding subset, starting at the
    /// student's current values.
    pub fn teacher_init(&self) -> ParamStore {
        self.params.filtered(TEACHER_PREFIXES)
    }
}

/// Forward-pass context: a tape, a bound parameter set, and the dims.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub bound: &'a BoundParams,
    pub dims: &'a ModelDims,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, bound: &'a BoundParams, dims: &'a ModelDims) -> Self {
        Self { tape, bound, dims }
    }

    pub(crate) fn linear(&mut self, prefix: &str, x: TensorId) -> TensorId {
        let w = self.bound.id(&format!("{}.w", prefix));
        let b = self.bound.id(&format!("{}.b", prefix));
        let h = self.tape.matmul(x, w);
        self.tape.add_row(h, b)
    }

    fn layer_norm(&mut self, prefix: &str, x: TensorId) -> TensorId {
        let g = self.bound.id(&format!("{}.g", prefix));
        let b = self.bound.id(&format!("{}.b", prefix));
        self.tape.layer_norm(x, g, b, LN_EPS)
    }

    pub(crate) fn block(&mut self, prefix: &str, h: TensorId, seqs: usize) -> TensorId {
        let ln1 = self.layer_norm(&format!("{}.ln1", prefix), h);
        let q = self.linear(&format!("{}.attn.q", prefix), ln1);
        let k = self.linear(&format!("{}.attn.k", prefix), ln1);
        let v = self.linear(&format!("{}.attn.v", prefix), ln1);
        let att = self.tape.attention(q, k, v, seqs, self.dims.heads);
        let att = self.linear(&format!("{}.attn.o", prefix), att);
        let h = self.tape.add(h, att);
        let ln2 = self.layer_norm(&format!("{}.ln2", prefix), h);
        let m = self.linear(&format!("{}.mlp.0", prefix), ln2);
        let m = self.tape.gelu(m);
        let m = self.linear(&format!("{}.mlp.1", prefix), m);
        self.tape.add(h, m)
    }

    /// Patch tokens (seqs*L x patch_dim) -> hidden width.
    pub fn embed(&mut self, tokens: TensorId) -> TensorId {
        self.linear("embed", tokens)
    }

    /// Adds the positional table and runs the encoder blocks.
    pub fn encode(&mut self, h: TensorId, seqs: usize) -> TensorId {
        let pos = self.bound.id("pos");
        let mut h = self.tape.add_tiled(h, pos, seqs);
        for i in 0..self.dims.enc_blocks {
            h = self.block(&format!("enc.{}", i), h, seqs);
        }
        h
    }

    /// Token-wise linear factor split: (content grid, style grid).
    pub fn factorize(&mut self, h: TensorId) -> (TensorId, TensorId) {
        let f = self.linear("fd", h);
        let c = self.tape.slice_cols(f, 0, self.dims.d_c);
        let s = self.tape.slice_cols(f, self.dims.d_c, self.dims.d_c + self.dims.d_s);
        (c, s)
    }

    /// Token-wise recombination of factor grids back to hidden width.
    pub fn aggregate(&mut self, c: TensorId, s: TensorId) -> TensorId {
        let cat = self.tape.concat_cols(c, s);
        self.linear("agg", cat)
    }

    /// Decoder: optional mask-token fill at absent positions, decoder
    /// positional table, blocks, and the linear head back to patch space.
    pub fn decode(&mut self, h: TensorId, seqs: usize, present: Option<&[bool]>) -> TensorId {
        let mut h = match present {
            Some(keep) => {
                let tok = self.bound.id("mask_token");
                self.tape.fill_rows(h, tok, keep)
            }
            None => h,
        };
        let pos = self.bound.id("dec.pos");
        h = self.tape.add_tiled(h, pos, seqs);
        for i in 0..self.dims.dec_blocks {
            h = self.block(&format!("dec.{}", i), h, seqs);
        }
        self.linear("head", h)
    }

    /// Mean over each sequence's L token rows.
    pub fn pool(&mut self, grid: TensorId) -> TensorId {
        self.tape.pool_rows(grid, self.dims.l())
    }

    /// Domain logits from pooled factors. The content path goes through
    /// gradient reversal with strength `grl_lambda`; the style path is plain.
    pub fn classify_domains(
        &mut self,
        pooled_c: TensorId,
        pooled_s: TensorId,
        grl_lambda: f64,
    ) -> (TensorId, TensorId) {
        let rev = self.tape.gradient_reversal(pooled_c, grl_lambda);
        let lc = self.mlp3("gc", rev);
        let ls = self.mlp3("gs", pooled_s);
        (lc, ls)
    }

    fn mlp3(&mut self, head: &str, x: TensorId) -> TensorId {
        let h = self.linear(&format!("{}.0", head), x);
        let h = self.tape.relu(h);
        let h = self.linear(&format!("{}.1", head), h);
        let h = self.tape.relu(h);
        self.linear(&format!("{}.2", head), h)
    }

    /// embed -> encode -> factorize in one call.
    pub fn encode_to_factors(&mut self, tokens: TensorId, seqs: usize) -> (TensorId, TensorId) {
        let h = self.embed(tokens);
        let h = self.encode(h, seqs);
        self.factorize(h)
    }
}

/// Trilinear resample of a positional table between cubic token grids.
/// Rows are grid points in z-major raster order.
pub fn resize_pos_embed(table: &Array2<f64>, from_side: usize, to_side: usize) -> Array2<f64> {
    assert_eq!(table.nrows(), from_side.pow(3), "resize_pos_embed: row count");
    if from_side == to_side {
        return table.clone();
    }
    let d = table.ncols();
    let mut out = Array2::zeros((to_side.pow(3), d));
    let scale = from_side as f64 / to_side as f64;
    let coord = |i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (from_side - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(from_side - 1);
        (i0, i1, pos - i0 as f64)
    };
    for z in 0..to_side {
        let (z0, z1, fz) = coord(z);
        for y in 0..to_side {
            let (y0, y1, fy) = coord(y);
            for x in 0..to_side {
                let (x0, x1, fx) = coord(x);
                let dst = z * to_side * to_side + y * to_side + x;
                for ((zi, wz), (yi, wy), (xi, wx)) in
                    [(z0, 1.0 - fz), (z1, fz)].into_iter().flat_map(|zz| {
                        [(y0, 1.0 - fy), (y1, fy)].into_iter().flat_map(move |yy| {
                            [(x0, 1.0 - fx), (x1, fx)].into_iter().map(move |xx| (zz, yy, xx))
                        })
                    })
                {
                    let w = wz * wy * wx;
                    if w == 0.0 {
                        continue;
                    }
                    let src = zi * from_side * from_side + yi * from_side + xi;
                    for k in 0..d {
                        out[[dst, k]] += w * table[[src, k]];
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use meduet_tensor::Tape;

    fn small_dims() -> ModelDims {
        ModelDims {
            c_lat: 2,
            latent_side: 4,
            patch: 2,
            d_h: 16,
            d_c: 8,
            d_s: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            clf_hidden: 8,
            n_domains: 3,
        }
    }

    #[test]
    fn param_count_formula_matches_store() {
        let dims = small_dims();
        let model = Model::init(dims.clone(), 0);
        assert_eq!(model.params.n_scalars(), dims.param_count());
        let default_model = Model::init(ModelDims::default(), 0);
        assert_eq!(
            default_model.params.n_scalars(),
            ModelDims::default().param_count()
        );
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(small_dims(), 9);
        let b = Model::init(small_dims(), 9);
        for ((_, x), (_, y)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn patchify_unpatchify_round_trip() {
        let dims = small_dims();
        let lat = LatentVolume {
            channels: dims.c_lat,
            side: dims.latent_side,
            data: (0..dims.c_lat * 64).map(|v| v as f64 * 0.1).collect(),
        };
        let rows = patchify(&lat, dims.patch);
        assert_eq!(rows.dim(), (dims.l(), dims.patch_dim()));
        let back = unpatchify(&rows, &dims);
        assert_eq!(back.data, lat.data);
    }

    #[test]
    fn teacher_subset_covers_reencoding_only() {
        let model = Model::init(small_dims(), 1);
        let teacher = model.teacher_init();
        assert!(teacher.contains("embed.w"));
        assert!(teacher.contains("pos"));
        assert!(teacher.contains("enc.0.attn.q.w"));
        assert!(teacher.contains("fd.w"));
        assert!(!teacher.contains("dec.0.attn.q.w"));
        assert!(!teacher.contains("agg.w"));
        assert!(!teacher.contains("gc.0.w"));
        assert!(!teacher.contains("mask_token"));
        assert!(!teacher.contains("alpha_c"));
    }

    #[test]
    fn zeroed_blocks_make_encode_identity_plus_pos() {
        let dims = small_dims();
        let mut model = Model::init(dims.clone(), 2);
        for i in 0..dims.enc_blocks {
            for name in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.0", "mlp.1"] {
                model.params.get_mut(&format!("enc.{}.{}.w", i, name)).fill(0.0);
                model.params.get_mut(&format!("enc.{}.{}.b", i, name)).fill(0.0);
            }
        }
        let l = dims.l();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let x = tape.constant(Array2::from_shape_fn((l, dims.d_h), |(i, j)| {
            (i * 31 + j) as f64 * 0.01
        }));
        let mut fwd = Forward::new(&mut tape, &bound, &dims);
        let out = fwd.encode(x, 1);
        let expect = tape.value(x) + model.params.get("pos");
        for (a, b) in tape.value(out).iter().zip(expect.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_decoder_configuration_passes_tokens_through() {
        // patch_dim == d_h lets the head be the identity matrix.
        let dims = ModelDims {
            c_lat: 2,
            latent_side: 4,
            patch: 2,
            d_h: 16,
            d_c: 8,
            d_s: 4,
            enc_blocks: 1,
            dec_blocks: 2,
            heads: 2,
            mlp_ratio: 2,
            clf_hidden: 8,
            n_domains: 2,
        };
        assert_eq!(dims.patch_dim(), dims.d_h);
        let mut model = Model::init(dims.clone(), 3);
        model.params.get_mut("dec.pos").fill(0.0);
        for i in 0..dims.dec_blocks {
            for name in ["attn.q", "attn.k", "attn.v", "attn.o", "mlp.0", "mlp.1"] {
                model.params.get_mut(&format!("dec.{}.{}.w", i, name)).fill(0.0);
                model.params.get_mut(&format!("dec.{}.{}.b", i, name)).fill(0.0);
            }
        }
        model.params.get_mut("head.w").assign(&Array2::eye(dims.d_h));
        model.params.get_mut("head.b").fill(0.0);

        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let x = tape.constant(Array2::from_shape_fn((dims.l(), dims.d_h), |(i, j)| {
            ((i + 1) * (j + 2)) as f64 * 0.003
        }));
        let mut fwd = Forward::new(&mut tape, &bound, &dims);
        let out = fwd.decode(x, 1, None);
        for (a, b) in tape.value(out).iter().zip(tape.value(x).iter()) {
            assert_eq!(a, b, "identity decoder must pass tokens through exactly");
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant_with_positions() {
        let dims = small_dims();
        let model = Model::init(dims.clone(), 4);
        let l = dims.l();
        let perm: Vec<usize> = (0..l).map(|i| (i * 3 + 1) % l).collect();

        let x = Array2::from_shape_fn((l, dims.d_h), |(i, j)| ((i * 7 + j) as f64).sin());
        let run = |params: &ParamStore, input: &Array2<f64>| -> Array2<f64> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let xid = tape.constant(input.clone());
            let mut fwd = Forward::new(&mut tape, &bound, &dims);
            let out = fwd.encode(xid, 1);
            tape.value(out).clone()
        };

        let base = run(&model.params, &x);

        // Permute inputs AND both positional rows the same way.
        let mut permuted = model.clone();
        let pos = model.params.get("pos").clone();
        let mut pos_p = pos.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pos_p.row_mut(dst).assign(&pos.row(src));
        }
        permuted.params.get_mut("pos").assign(&pos_p);
        let mut x_p = x.clone();
        for (dst, &src) in perm.iter().enumerate() {
            x_p.row_mut(dst).assign(&x.row(src));
        }
        let out_p = run(&permuted.params, &x_p);

        for (dst, &src) in perm.iter().enumerate() {
            for j in 0..dims.d_h {
                assert!(
                    (out_p[[dst, j]] - base[[src, j]]).abs() < 1e-12,
                    "row {} differs after permutation",
                    dst
                );
            }
        }
    }

    #[test]
    fn aggregate_is_linear_without_bias() {
        let dims = small_dims();
        let mut model = Model::init(dims.clone(), 5);
        model.params.get_mut("agg.b").fill(0.0);
        let l = dims.l();
        let c = Array2::from_shape_fn((l, dims.d_c), |(i, j)| (i + j) as f64 * 0.01);
        let s = Array2::from_shape_fn((l, dims.d_s), |(i, j)| (i * j) as f64 * 0.02);
        let run = |cm: &Array2<f64>, sm: &Array2<f64>| {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape, false);
            let cid = tape.constant(cm.clone());
            let sid = tape.constant(sm.clone());
            let mut fwd = Forward::new(&mut tape, &bound, &dims);
            let out = fwd.aggregate(cid, sid);
            tape.value(out).clone()
        };
        let once = run(&c, &s);
        let scaled = run(&(&c * 2.5), &(&s * 2.5));
        for (a, b) in scaled.iter().zip(once.iter()) {
            assert!((a - b * 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn factor_widths_partition_the_projection() {
        let dims = small_dims();
        let model = Model::init(dims.clone(), 6);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, false);
        let x = tape.constant(Array2::from_elem((dims.l(), dims.d_h), 0.1));
        let mut fwd = Forward::new(&mut tape, &bound, &dims);
        let (c, s) = fwd.factorize(x);
        assert_eq!(tape.value(c).dim(), (dims.l(), dims.d_c));
        assert_eq!(tape.value(s).dim(), (dims.l(), dims.d_s));
    }

    #[test]
    fn resize_pos_embed_identity_and_constant() {
        let table = Array2::from_shape_fn((8, 3), |(i, j)| (i * 3 + j) as f64);
        let same = resize_pos_embed(&table, 2, 2);
        assert_eq!(same, table);

        let constant = Array2::from_elem((8, 2), 1.25);
        let up = resize_pos_embed(&constant, 2, 3);
        assert_eq!(up.nrows(), 27);
        for &v in up.iter() {
            assert!((v - 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_dims_are_refused() {
        let mut dims = small_dims();
        dims.patch = 3; // does not divide 4
        assert!(dims.validate().is_err());
        let mut dims2 = small_dims();
        dims2.heads = 5;
        assert!(dims2.validate().is_err());
    }
}
