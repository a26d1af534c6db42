//! A small vision transformer whose attention keys can be switched off.
//!
//! Images are cut into `P×P` patches, linearly embedded, offset by a learned
//! positional table (2-D sine/cosine initialised) and prefixed with a class
//! token. Each pre-norm block runs multi-head attention followed by a GELU
//! MLP. An optional [`KeyMask`] removes patch keys from every block's
//! softmax support; the class token is always attended.
//!
//! Two classifiers read the token grid by global max pooling: the main head
//! on the final layer and an auxiliary head on layer `aux_layer` (1-based).

use rand::Rng;

use crate::error::{Error, Result};
use crate::masking::KeyMask;
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    /// 1-based layer feeding the auxiliary classifier, in `[1, depth − 1]`.
    pub aux_layer: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            depth: 4,
            heads: 2,
            dim: 64,
            mlp_hidden: 256,
            num_classes: 3,
            aux_layer: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.depth < 2 {
            return Err(Error::config("depth must be at least 2 for the auxiliary head"));
        }
        if self.aux_layer < 1 || self.aux_layer >= self.depth {
            return Err(Error::config(format!(
                "aux_layer {} outside [1, {}]",
                self.aux_layer,
                self.depth - 1
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.dim % 4 != 0 {
            return Err(Error::config("dim must be a multiple of 4 (2-D sincos table)"));
        }
        if self.num_classes == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("num_classes and mlp_hidden must be positive"));
        }
        Ok(())
    }

    /// Side of the token grid, `H / P`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// Per-head query/key width (equal to the value width).
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// RGB image with values stored row-major as `[y][x][channel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::dim(format!(
                "{} values for a {height}×{width}×3 image",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Image {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

/// Cuts an image into non-overlapping `P×P` patches. Row `i` is the patch at
/// grid position `(i / W′, i % W′)`, flattened as `[py][px][channel]`.
pub fn patchify(image: &Image, patch: usize) -> Result<Tensor> {
    if patch == 0 || image.height % patch != 0 || image.width % patch != 0 {
        return Err(Error::config(format!(
            "{}×{} image is not divisible into {patch}-pixel patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch, image.width / patch);
    let row_len = 3 * patch * patch;
    let mut data = Vec::with_capacity(gh * gw * row_len);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * image.width + gx * patch) * 3;
                data.extend_from_slice(&image.data[start..start + patch * 3]);
            }
        }
    }
    Tensor::new(vec![gh * gw, row_len], data)
}

/// Global max pooling over the token axis: `N×D → 1×D`.
pub fn gmp(patches: &Tensor) -> Result<Tensor> {
    if patches.rows() == 0 {
        return Err(Error::dim("gmp over zero tokens"));
    }
    let mut out = patches.row(0).to_vec();
    for i in 1..patches.rows() {
        for (o, &v) in out.iter_mut().zip(patches.row(i)) {
            *o = o.max(v);
        }
    }
    Ok(Tensor::row_vector(&out))
}

/// Token outputs of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenTensor {
    pub cls: Tensor,
    pub patches: Tensor,
    /// 1-based layer index.
    pub layer: usize,
}

impl TokenTensor {
    /// Reshapes patch tokens `N×D` into a `D×H′×W′` feature map.
    pub fn feature_map(&self, grid_h: usize, grid_w: usize) -> Result<Tensor> {
        let (n, d) = (self.patches.rows(), self.patches.cols());
        if n != grid_h * grid_w {
            return Err(Error::dim(format!("{n} tokens on a {grid_h}×{grid_w} grid")));
        }
        self.patches.transpose().reshape(&[d, grid_h, grid_w])
    }

    /// Inverse of [`TokenTensor::feature_map`].
    pub fn patches_from_feature_map(map: &Tensor) -> Result<Tensor> {
        let s = map.shape();
        if s.len() != 3 {
            return Err(Error::dim("feature map must be D×H′×W′"));
        }
        let flat = map.clone().reshape(&[s[0], s[1] * s[2]])?;
        Ok(flat.transpose())
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Layers `1..=L` in order.
    pub per_layer: Vec<TokenTensor>,
    pub cls_logits: Tensor,
    pub aux_logits: Tensor,
    /// `attention[layer][head]` is the `(N+1)×(N+1)` weight matrix, class token first.
    pub attention: Vec<Vec<Tensor>>,
}

/// Graph handles produced by [`Encoder::forward_graph`].
#[derive(Clone, Debug)]
pub struct EncoderVars {
    /// `1×D` class token per layer.
    pub cls: Vec<Var>,
    /// `N×D` patch tokens per layer.
    pub patches: Vec<Var>,
    pub cls_logits: Var,
    pub aux_logits: Var,
    /// Attention nodes, one per layer; see [`Graph::attention_probs`].
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, fan_out])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[1, dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim])),
        }
    }

    fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    norm2: Norm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    cfg: EncoderConfig,
    embed: Linear,
    cls_token: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
    head: ParamId,
    aux_head: ParamId,
}

pub(crate) fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("extent")
}

/// 2-D sine/cosine table of shape `(grid·grid)×dim`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sincos_table(grid: usize, dim: usize) -> Tensor {
    let quarter = dim / 4;
    let mut data = vec![0.0; grid * grid * dim];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = &mut data[(gy * grid + gx) * dim..(gy * grid + gx + 1) * dim];
            for (half, pos) in [(0, gy), (1, gx)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                    let a = pos as f64 * omega;
                    row[half * 2 * quarter + i] = a.sin();
                    row[half * 2 * quarter + quarter + i] = a.cos();
                }
            }
        }
    }
    Tensor::new(vec![grid * grid, dim], data).expect("extent")
}

impl Encoder {
    /// Registers freshly initialised parameters under the `encoder.` prefix.
    pub fn new<R: Rng + ?Sized>(cfg: EncoderConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let embed = Linear::new(store, "encoder.patch_embed", cfg.patch_dim(), d, rng);
        let cls_data = (0..d).map(|_| rng.gen_range(-0.02..0.02)).collect::<Vec<_>>();
        let cls_token = store.add("encoder.cls_token", Tensor::row_vector(&cls_data));
        let pos_embed = store.add("encoder.pos_embed", sincos_table(cfg.grid(), d));
        let blocks = (0..cfg.depth)
            .map(|l| {
                let p = format!("encoder.blocks.{l}");
                Block {
                    norm1: Norm::new(store, &format!("{p}.norm1"), d),
                    q: Linear::new(store, &format!("{p}.attn.q"), d, d, rng),
                    k: Linear::new(store, &format!("{p}.attn.k"), d, d, rng),
                    v: Linear::new(store, &format!("{p}.attn.v"), d, d, rng),
                    proj: Linear::new(store, &format!("{p}.attn.proj"), d, d, rng),
                    norm2: Norm::new(store, &format!("{p}.norm2"), d),
                    fc1: Linear::new(store, &format!("{p}.mlp.fc1"), d, cfg.mlp_hidden, rng),
                    fc2: Linear::new(store, &format!("{p}.mlp.fc2"), cfg.mlp_hidden, d, rng),
                }
            })
            .collect();
        let head = store.add("encoder.head.weight", xavier(d, cfg.num_classes, rng));
        let aux_head = store.add("encoder.aux_head.weight", xavier(d, cfg.num_classes, rng));
        Ok(Encoder {
            cfg,
            embed,
            cls_token,
            pos_embed,
            blocks,
            head,
            aux_head,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// `D×C` weights of the final-layer classifier.
    pub fn head_weight(&self) -> ParamId {
        self.head
    }

    /// `D×C` weights of the auxiliary classifier.
    pub fn aux_head_weight(&self) -> ParamId {
        self.aux_head
    }

    /// Records a forward pass on `g`. With `mask`, every block drops the
    /// masked patch keys from its attention support.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        patches: Var,
        mask: Option<&KeyMask>,
    ) -> Result<EncoderVars> {
        let n = self.cfg.num_tokens();
        let pv = g.value(patches);
        if pv.rows() != n || pv.cols() != self.cfg.patch_dim() {
            return Err(Error::dim(format!(
                "patch matrix {:?} does not match {n}×{}",
                pv.shape(),
                self.cfg.patch_dim()
            )));
        }
        let mut keep = vec![true; n + 1];
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::dim(format!("key mask of {} for {n} tokens", m.len())));
            }
            if m.num_kept() == 0 {
                return Err(Error::Domain("key mask keeps no patch tokens".into()));
            }
            keep[1..].copy_from_slice(m.keep());
        }

        let x = self.embed.apply(g, store, patches)?;
        let pos = g.param(store, self.pos_embed);
        let x = g.add(x, pos)?;
        let cls = g.param(store, self.cls_token);
        let mut x = g.concat_rows(&[cls, x])?;

        let heads = self.cfg.heads;
        let mut out = EncoderVars {
            cls: Vec::with_capacity(self.cfg.depth),
            patches: Vec::with_capacity(self.cfg.depth),
            cls_logits: x,
            aux_logits: x,
            attention: Vec::with_capacity(self.cfg.depth),
        };
        for block in &self.blocks {
            let h = block.norm1.apply(g, store, x)?;
            let q = block.q.apply(g, store, h)?;
            let k = block.k.apply(g, store, h)?;
            let v = block.v.apply(g, store, h)?;
            let a = g.attention(q, k, v, heads, &keep)?;
            out.attention.push(a);
            let a = block.proj.apply(g, store, a)?;
            x = g.add(x, a)?;
            let h = block.norm2.apply(g, store, x)?;
            let h = block.fc1.apply(g, store, h)?;
            let h = g.gelu(h);
            let h = block.fc2.apply(g, store, h)?;
            x = g.add(x, h)?;
            out.cls.push(g.slice_rows(x, 0, 1)?);
            out.patches.push(g.slice_rows(x, 1, n)?);
        }

        let last = *out.patches.last().expect("depth ≥ 2");
        let pooled = g.col_max(last)?;
        let w = g.param(store, self.head);
        out.cls_logits = g.matmul(pooled, w)?;
        let aux = out.patches[self.cfg.aux_layer - 1];
        let pooled = g.col_max(aux)?;
        let w = g.param(store, self.aux_head);
        out.aux_logits = g.matmul(pooled, w)?;
        Ok(out)
    }

    /// Runs a pass outside of training and returns plain values.
    pub fn forward(&self, store: &ParamStore, image: &Image, mask: Option<&KeyMask>) -> Result<EncoderOutput> {
        if image.height != self.cfg.image_size || image.width != self.cfg.image_size {
            return Err(Error::dim(format!(
                "{}×{} image for a {} encoder",
                image.height, image.width, self.cfg.image_size
            )));
        }
        let mut g = Graph::new();
        let patches = g.constant(patchify(image, self.cfg.patch_size)?);
        let vars = self.forward_graph(&mut g, store, patches, mask)?;
        Ok(collect_output(&g, &vars))
    }
}

/// Copies the values behind [`EncoderVars`] out of a graph.
pub fn collect_output(g: &Graph, vars: &EncoderVars) -> EncoderOutput {
    let per_layer = vars
        .cls
        .iter()
        .zip(&vars.patches)
        .enumerate()
        .map(|(l, (&c, &p))| TokenTensor {
            cls: g.value(c).clone(),
            patches: g.value(p).clone(),
            layer: l + 1,
        })
        .collect();
    EncoderOutput {
        per_layer,
        cls_logits: g.value(vars.cls_logits).clone(),
        aux_logits: g.value(vars.aux_logits).clone(),
        attention: vars
            .attention
            .iter()
            .map(|&a| g.attention_probs(a).map(<[Tensor]>::to_vec).unwrap_or_default())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::sample_key_mask;
    use crate::numerics::{masked_softmax, matmul, matmul_t};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_image(size: usize) -> Image {
        let data = (0..size * size * 3).map(|i| (i as f64 * 0.37).sin()).collect();
        Image::new(size, size, data).unwrap()
    }

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            image_size: 16,
            patch_size: 4,
            depth: 2,
            heads: 2,
            dim: 8,
            mlp_hidden: 16,
            num_classes: 2,
            aux_layer: 1,
        }
    }

    #[test]
    fn patchify_single_patch() {
        let img = ramp_image(8);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[1, 192]);
    }

    #[test]
    fn patchify_constant_rows_identical() {
        let img = Image::filled(16, 16, [0.1, 0.2, 0.3]);
        let p = patchify(&img, 4).unwrap();
        for i in 1..p.rows() {
            assert_eq!(p.row(i), p.row(0));
        }
    }

    #[test]
    fn patchify_matches_direct_indexing() {
        let img = ramp_image(16);
        let p = patchify(&img, 8).unwrap();
        assert_eq!(p.shape(), &[4, 192]);
        for i in 0..4 {
            let (gy, gx) = (i / 2, i % 2);
            for py in 0..8 {
                for px in 0..8 {
                    let rgb = img.pixel(gy * 8 + py, gx * 8 + px);
                    for c in 0..3 {
                        assert_eq!(p.at(i, (py * 8 + px) * 3 + c), rgb[c]);
                    }
                }
            }
        }
    }

    #[test]
    fn patchify_rejects_indivisible() {
        let img = ramp_image(10);
        assert!(matches!(patchify(&img, 4), Err(Error::Config(_))));
    }

    #[test]
    fn gmp_cases() {
        let p = Tensor::from_rows(&[&[1.0, 5.0], &[3.0, 2.0]]);
        assert_eq!(gmp(&p).unwrap().data(), &[3.0, 5.0]);
        let one = Tensor::from_rows(&[&[0.5, -1.0, 2.0]]);
        assert_eq!(gmp(&one).unwrap().data(), one.data());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let m = Tensor::new(vec![4, 3], data).unwrap();
        let pooled = gmp(&m).unwrap();
        for j in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..4 {
                if m.at(i, j) > best {
                    best = m.at(i, j);
                }
            }
            assert_eq!(pooled.data()[j], best);
        }
    }

    #[test]
    fn feature_map_round_trip() {
        let data: Vec<f64> = (0..16 * 8).map(|i| i as f64).collect();
        let t = TokenTensor {
            cls: Tensor::zeros(&[1, 8]),
            patches: Tensor::new(vec![16, 8], data).unwrap(),
            layer: 1,
        };
        let map = t.feature_map(4, 4).unwrap();
        assert_eq!(map.shape(), &[8, 4, 4]);
        // channel 3 at (row 2, col 1) is token 9
        assert_eq!(map.data()[3 * 16 + 2 * 4 + 1], t.patches.at(9, 3));
        assert_eq!(TokenTensor::patches_from_feature_map(&map).unwrap(), t.patches);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.aux_layer = 2;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.image_size = 18;
        assert!(c.validate().is_err());
        assert!(EncoderConfig::default().validate().is_ok());
        assert_eq!(EncoderConfig::default().num_tokens(), 64);
    }

    #[test]
    fn shapes_and_all_keep_equivalence() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let img = ramp_image(16);
        let plain = enc.forward(&store, &img, None).unwrap();
        let keep = KeyMask::all_keep(4, 4);
        let masked = enc.forward(&store, &img, Some(&keep)).unwrap();
        assert_eq!(plain.per_layer.len(), 2);
        for (a, b) in plain.per_layer.iter().zip(&masked.per_layer) {
            assert_eq!(a.patches.shape(), &[16, 8]);
            assert_eq!(a.patches, b.patches);
            assert_eq!(a.cls, b.cls);
        }
        assert_eq!(plain.cls_logits.len(), 2);
        assert_eq!(plain.cls_logits, masked.cls_logits);
    }

    #[test]
    fn dropped_keys_receive_zero_weight_everywhere() {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::new(cfg, &mut store, &mut rng).unwrap();
        let img = ramp_image(16);
        let mask = sample_key_mask(4, 4, 0.6, 2, &mut rng).unwrap();
        let out = enc.forward(&store, &img, Some(&mask)).unwrap();
        for layer in &out.attention {
            for p in layer {
                for i in 0..p.rows() {
                    assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for (j, &k) in mask.keep().iter().enumerate() {
                        if !k {
                            assert_eq!(p.at(i, j + 1), 0.0);
                        }
                    }
                }
            }
        }
    }

    /// One block, one head, four tokens with hand-set weights: recompute the
    /// block output directly from the definition.
    #[test]
    fn single_block_matches_direct_computation() {
        let cfg = EncoderConfig {
            image_size: 4,
            patch_size: 2,
            depth: 2,
            heads: 1,
            dim: 4,
            mlp_hidden: 4,
            num_classes: 1,
            aux_layer: 1,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = Encoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        // deterministic hand-set values for every parameter
        for id in store.ids().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let len = t.len();
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + id.0 * 3) % 11) as f64 / 11.0 - 0.45 + 0.01 * len as f64 / 100.0;
            }
        }
        let img = ramp_image(4);
        let mask = KeyMask::from_keep(2, 2, vec![true, false, true, true]).unwrap();
        let out = enc.forward(&store, &img, Some(&mask)).unwrap();

        let p = |name: &str| store.get(store.find(name).unwrap()).clone();
        let ln = |x: &Tensor, g: &Tensor, b: &Tensor| {
            let mut y = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                let mean = row.iter().sum::<f64>() / 4.0;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
                for j in 0..4 {
                    y.row_mut(r)[j] = (row[j] - mean) / (var + 1e-6).sqrt() * g.data()[j] + b.data()[j];
                }
            }
            y
        };
        let lin = |x: &Tensor, name: &str| {
            let mut y = matmul(x, &p(&format!("{name}.weight"))).unwrap();
            let b = p(&format!("{name}.bias"));
            for r in 0..y.rows() {
                for (v, bb) in y.row_mut(r).iter_mut().zip(b.data()) {
                    *v += bb;
                }
            }
            y
        };
        let patches = patchify(&img, 2).unwrap();
        let mut x0 = lin(&patches, "encoder.patch_embed");
        let pos = p("encoder.pos_embed");
        for (v, q) in x0.data_mut().iter_mut().zip(pos.data()) {
            *v += q;
        }
        let mut rows = p("encoder.cls_token").data().to_vec();
        rows.extend_from_slice(x0.data());
        let x = Tensor::new(vec![5, 4], rows).unwrap();
        let h = ln(&x, &p("encoder.blocks.0.norm1.gamma"), &p("encoder.blocks.0.norm1.beta"));
        let q = lin(&h, "encoder.blocks.0.attn.q");
        let k = lin(&h, "encoder.blocks.0.attn.k");
        let v = lin(&h, "encoder.blocks.0.attn.v");
        let s = matmul_t(&q, false, &k, true).unwrap().map(|a| a / 2.0);
        let a = masked_softmax(&s, &[true, true, false, true, true]).unwrap();
        let z = matmul(&a, &v).unwrap();
        let z = lin(&z, "encoder.blocks.0.attn.proj");
        let mut x1 = x.clone();
        x1.add_assign(&z);
        let h = ln(&x1, &p("encoder.blocks.0.norm2.gamma"), &p("encoder.blocks.0.norm2.beta"));
        let h = lin(&h, "encoder.blocks.0.mlp.fc1").map(|t| {
            0.5 * t * (1.0 + (0.797_884_560_802_865_4 * (t + 0.044715 * t * t * t)).tanh())
        });
        let h = lin(&h, "encoder.blocks.0.mlp.fc2");
        x1.add_assign(&h);

        assert!(out.attention[0][0].max_abs_diff(&a) < 1e-14);
        let got = &out.per_layer[0];
        assert!(got.cls.data().iter().zip(x1.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        assert!(got.patches.data().iter().zip(&x1.data()[4..]).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
