//! Sparse autoencoder over instance embeddings.
//!
//! ```text
//! h     = ReLU(W_enc x + b)            W_enc: d_hid x d_in
//! x_hat = sum_i h_i f_i                f_i = row i of W_dec (d_hid x d_in)
//! L(x)  = ||x_hat - x||^2 + l1 * ||h||_1
//! ```
//!
//! Batch losses are means over the batch of the per-sample terms. Gradients
//! are hand-derived; see [`SaeParams::backward`].

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binfmt::{dim_u32, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::numerics::{adam_step, axpy, dot, stream_rng, AdamConfig, AdamState, Matrix};

pub const PMS1_MAGIC: &str = "PMS1";
pub const PMS1_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SaeParams {
    pub w_enc: Matrix,
    pub b: Vec<f64>,
    /// Row `i` is the concept direction `f_i`.
    pub w_dec: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SaeLoss {
    pub total: f64,
    pub recon: f64,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Matrix,
    pub b: Vec<f64>,
    pub w_dec: Matrix,
}

impl SaeGrads {
    fn zeros(d_in: usize, d_hid: usize) -> Self {
        SaeGrads {
            w_enc: Matrix::zeros(d_hid, d_in),
            b: vec![0.0; d_hid],
            w_dec: Matrix::zeros(d_hid, d_in),
        }
    }

    fn clear(&mut self) {
        self.w_enc.fill(0.0);
        self.b.fill(0.0);
        self.w_dec.fill(0.0);
    }

    /// Flattened in parameter declaration order (W_enc, b, W_dec).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w_enc.data().len() * 2 + self.b.len());
        v.extend_from_slice(self.w_enc.data());
        v.extend_from_slice(&self.b);
        v.extend_from_slice(self.w_dec.data());
        v
    }
}

impl SaeParams {
    pub fn new(w_enc: Matrix, b: Vec<f64>, w_dec: Matrix) -> Result<Self> {
        if w_enc.rows() != b.len() || w_dec.rows() != b.len() || w_enc.cols() != w_dec.cols() {
            return Err(Error::Shape(format!(
                "W_enc {}x{}, b {}, W_dec {}x{}",
                w_enc.rows(),
                w_enc.cols(),
                b.len(),
                w_dec.rows(),
                w_dec.cols()
            )));
        }
        if !w_enc.is_finite() || !w_dec.is_finite() || b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("SAE parameters".into()));
        }
        Ok(SaeParams { w_enc, b, w_dec })
    }

    /// Glorot-uniform decoder with the encoder starting as a copy of it (tied),
    /// zero bias. Requires an overcomplete latent.
    pub fn init(d_in: usize, d_hid: usize, seed: u64) -> Result<Self> {
        if d_in == 0 || d_hid <= d_in {
            return Err(Error::InvalidConfig(format!(
                "SAE needs d_hid > d_in >= 1, got d_in={d_in}, d_hid={d_hid}"
            )));
        }
        let mut rng = stream_rng(seed, 0);
        let w_dec = Matrix::glorot_uniform(d_hid, d_in, &mut rng);
        let w_enc = w_dec.clone();
        Ok(SaeParams {
            w_enc,
            b: vec![0.0; d_hid],
            w_dec,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_enc.cols()
    }

    pub fn d_hid(&self) -> usize {
        self.w_enc.rows()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in() {
            return Err(Error::Shape(format!(
                "embedding of length {} for an SAE with d_in = {}",
                x.len(),
                self.d_in()
            )));
        }
        Ok(())
    }

    /// Writes `ReLU(W_enc x + b)` into `h`; no shape checks.
    #[inline]
    pub(crate) fn encode_into(&self, x: &[f64], h: &mut [f64]) {
        for ((hi, row), bi) in h.iter_mut().zip(self.w_enc.iter_rows()).zip(&self.b) {
            *hi = (dot(row, x) + bi).max(0.0);
        }
    }

    #[inline]
    pub(crate) fn decode_into(&self, h: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (&hi, f) in h.iter().zip(self.w_dec.iter_rows()) {
            if hi != 0.0 {
                axpy(hi, f, out);
            }
        }
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut h = vec![0.0; self.d_hid()];
        self.encode_into(x, &mut h);
        Ok(h)
    }

    /// Encodes every row of `xs` into an `N x d_hid` matrix.
    pub fn encode_matrix(&self, xs: &Matrix) -> Result<Matrix> {
        if xs.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "embeddings of width {} for an SAE with d_in = {}",
                xs.cols(),
                self.d_in()
            )));
        }
        let d_hid = self.d_hid();
        let mut out = Matrix::zeros(xs.rows(), d_hid);
        for (r, x) in xs.iter_rows().enumerate() {
            self.encode_into(x, out.row_mut(r));
        }
        Ok(out)
    }

    pub fn decode(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.d_hid() {
            return Err(Error::Shape(format!(
                "concept vector of length {} for an SAE with d_hid = {}",
                h.len(),
                self.d_hid()
            )));
        }
        let mut out = vec![0.0; self.d_in()];
        self.decode_into(h, &mut out);
        Ok(out)
    }

    pub fn loss(&self, x: &[f64], l1: f64) -> Result<SaeLoss> {
        let h = self.encode(x)?;
        let x_hat = self.decode(&h)?;
        let recon: f64 = x_hat.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        let sparsity: f64 = h.iter().sum();
        Ok(SaeLoss {
            total: recon + l1 * sparsity,
            recon,
            sparsity,
        })
    }

    /// Mean loss over the rows of `xs`.
    pub fn batch_loss(&self, xs: &Matrix, l1: f64) -> Result<SaeLoss> {
        if xs.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        let mut acc = SaeLoss::default();
        for x in xs.iter_rows() {
            let l = self.loss(x, l1)?;
            acc.recon += l.recon;
            acc.sparsity += l.sparsity;
        }
        let n = xs.rows() as f64;
        acc.recon /= n;
        acc.sparsity /= n;
        acc.total = acc.recon + l1 * acc.sparsity;
        Ok(acc)
    }

    /// Loss and analytic gradients of the batch-mean loss over the rows of `batch`.
    ///
    /// With `r = x_hat - x` and `a = W_enc x + b`:
    /// `dL/dW_dec[i] = 2 h_i r`, `dL/dh_i = 2 f_i . r + l1` for `h_i > 0`,
    /// `dL/da_i = dL/dh_i * [a_i > 0]`, `dL/dW_enc[i] = dL/da_i x`, `dL/db_i = dL/da_i`.
    pub fn backward(&self, batch: &Matrix, l1: f64) -> Result<(SaeLoss, SaeGrads)> {
        if batch.rows() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if batch.cols() != self.d_in() {
            return Err(Error::Shape(format!(
                "batch width {} for an SAE with d_in = {}",
                batch.cols(),
                self.d_in()
            )));
        }
        let mut grads = SaeGrads::zeros(self.d_in(), self.d_hid());
        let mut ws = Workspace::new(self.d_in(), self.d_hid());
        let rows: Vec<&[f64]> = batch.iter_rows().collect();
        let loss = self.accumulate(&rows, l1, &mut grads, &mut ws);
        Ok((loss, grads))
    }

    fn accumulate(
        &self,
        batch: &[&[f64]],
        l1: f64,
        grads: &mut SaeGrads,
        ws: &mut Workspace,
    ) -> SaeLoss {
        grads.clear();
        let scale = 1.0 / batch.len() as f64;
        let mut recon_sum = 0.0;
        let mut sparsity_sum = 0.0;
        for x in batch {
            self.encode_into(x, &mut ws.h);
            ws.active.clear();
            ws.active
                .extend((0..ws.h.len()).filter(|&i| ws.h[i] > 0.0));
            ws.x_hat.fill(0.0);
            for &i in &ws.active {
                axpy(ws.h[i], self.w_dec.row(i), &mut ws.x_hat);
            }
            let mut recon = 0.0;
            for ((g, xh), xi) in ws.g.iter_mut().zip(&ws.x_hat).zip(x.iter()) {
                let r = xh - xi;
                recon += r * r;
                // d(mean loss)/d x_hat
                *g = 2.0 * r * scale;
            }
            recon_sum += recon;
            for &i in &ws.active {
                let hi = ws.h[i];
                sparsity_sum += hi;
                let dh = dot(self.w_dec.row(i), &ws.g) + l1 * scale;
                axpy(hi, &ws.g, grads.w_dec.row_mut(i));
                axpy(dh, x, grads.w_enc.row_mut(i));
                grads.b[i] += dh;
            }
        }
        let recon = recon_sum * scale;
        let sparsity = sparsity_sum * scale;
        SaeLoss {
            total: recon + l1 * sparsity,
            recon,
            sparsity,
        }
    }

    /// Flattened in declaration order (W_enc, b, W_dec).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.w_enc.data().len() * 2 + self.b.len());
        v.extend_from_slice(self.w_enc.data());
        v.extend_from_slice(&self.b);
        v.extend_from_slice(self.w_dec.data());
        v
    }

    pub fn from_flat(d_in: usize, d_hid: usize, flat: &[f64]) -> Result<Self> {
        let m = d_in * d_hid;
        if flat.len() != 2 * m + d_hid {
            return Err(Error::Shape(format!(
                "{} values for SAE {d_in}->{d_hid}",
                flat.len()
            )));
        }
        SaeParams::new(
            Matrix::from_vec(d_hid, d_in, flat[..m].to_vec())?,
            flat[m..m + d_hid].to_vec(),
            Matrix::from_vec(d_hid, d_in, flat[m + d_hid..].to_vec())?,
        )
    }

    /// Scales every nonzero decoder row to unit norm.
    pub fn normalize_decoder(&mut self) {
        for i in 0..self.d_hid() {
            let row = self.w_dec.row_mut(i);
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = ByteWriter::new();
        w.bytes(PMS1_MAGIC.as_bytes());
        w.u32(PMS1_VERSION);
        w.u32(dim_u32(path, "d_in", self.d_in())?);
        w.u32(dim_u32(path, "d_hid", self.d_hid())?);
        w.f64s(self.w_enc.data());
        w.f64s(&self.b);
        w.f64s(self.w_dec.data());
        write_file(path, &w.into_inner())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = read_file(path)?;
        let mut r = ByteReader::new(path, &bytes);
        r.header(PMS1_MAGIC, PMS1_VERSION)?;
        let d_in = r.u32()? as usize;
        let d_hid = r.u32()? as usize;
        let m = d_in
            .checked_mul(d_hid)
            .ok_or_else(|| r.malformed("size overflow"))?;
        let w_enc = r.f64s(m)?;
        let b = r.f64s(d_hid)?;
        let w_dec = r.f64s(m)?;
        r.finish()?;
        SaeParams::new(
            Matrix::from_vec(d_hid, d_in, w_enc)?,
            b,
            Matrix::from_vec(d_hid, d_in, w_dec)?,
        )
        .map_err(|e| r.malformed(e.to_string()))
    }
}

struct Workspace {
    h: Vec<f64>,
    x_hat: Vec<f64>,
    g: Vec<f64>,
    active: Vec<usize>,
}

impl Workspace {
    fn new(d_in: usize, d_hid: usize) -> Self {
        Workspace {
            h: vec![0.0; d_hid],
            x_hat: vec![0.0; d_in],
            g: vec![0.0; d_in],
            active: Vec::with_capacity(d_hid),
        }
    }
}

/// SAE training settings. Keys are flat so they can sit in a run config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SaeTrainConfig {
    pub d_hid: usize,
    /// Sparsity weight on `||h||_1`.
    pub l1: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Rescale decoder rows to unit norm after every step.
    pub renormalize_decoder: bool,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        SaeTrainConfig {
            d_hid: 256,
            l1: 3e-4,
            lr: 1e-2,
            epochs: 100,
            batch_size: 256,
            seed: 0,
            renormalize_decoder: false,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(Error::InvalidConfig(format!("l1 = {} must be >= 0", self.l1)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr = {} must be > 0", self.lr)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeTrainResult {
    pub params: SaeParams,
    /// Mean training loss of each epoch, accumulated over its mini-batches.
    pub history: Vec<SaeLoss>,
}

/// Mini-batch Adam over the rows of `instances`, reshuffled every epoch.
pub fn train_sae(instances: &Matrix, cfg: &SaeTrainConfig) -> Result<SaeTrainResult> {
    cfg.validate()?;
    if instances.rows() == 0 {
        return Err(Error::Data("empty instance pool".into()));
    }
    let d_in = instances.cols();
    let mut params = SaeParams::init(d_in, cfg.d_hid, cfg.seed)?;
    if cfg.renormalize_decoder {
        params.normalize_decoder();
    }
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut st_enc = AdamState::new(params.w_enc.data().len());
    let mut st_b = AdamState::new(params.b.len());
    let mut st_dec = AdamState::new(params.w_dec.data().len());
    let mut grads = SaeGrads::zeros(d_in, cfg.d_hid);
    let mut ws = Workspace::new(d_in, cfg.d_hid);
    let mut rng = stream_rng(cfg.seed, 1);
    let mut order: Vec<usize> = (0..instances.rows()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch: Vec<&[f64]> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch = SaeLoss::default();
        for chunk in order.chunks(cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| instances.row(i)));
            let loss = params.accumulate(&batch, cfg.l1, &mut grads, &mut ws);
            let w = chunk.len() as f64;
            epoch.total += loss.total * w;
            epoch.recon += loss.recon * w;
            epoch.sparsity += loss.sparsity * w;
            adam_step(params.w_enc.data_mut(), grads.w_enc.data(), &mut st_enc, &adam)?;
            adam_step(&mut params.b, &grads.b, &mut st_b, &adam)?;
            adam_step(params.w_dec.data_mut(), grads.w_dec.data(), &mut st_dec, &adam)?;
            if cfg.renormalize_decoder {
                params.normalize_decoder();
            }
        }
        let n = instances.rows() as f64;
        epoch.total /= n;
        epoch.recon /= n;
        epoch.sparsity /= n;
        if !epoch.total.is_finite() {
            return Err(Error::NonFinite("SAE training loss diverged".into()));
        }
        history.push(epoch);
    }
    Ok(SaeTrainResult { params, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Mean number of strictly positive entries per concept vector.
    pub mean_l0: f64,
    /// Concept indices with a positive activation on at least one instance.
    pub activated: usize,
}

pub fn sparsity_stats(instances: &Matrix, params: &SaeParams) -> Result<SparsityStats> {
    if instances.rows() == 0 {
        return Err(Error::Data("no instances".into()));
    }
    if instances.cols() != params.d_in() {
        return Err(Error::Shape(format!(
            "embeddings of width {} for an SAE with d_in = {}",
            instances.cols(),
            params.d_in()
        )));
    }
    let mut h = vec![0.0; params.d_hid()];
    let mut seen = vec![false; params.d_hid()];
    let mut l0_total = 0usize;
    for x in instances.iter_rows() {
        params.encode_into(x, &mut h);
        for (i, &v) in h.iter().enumerate() {
            if v > 0.0 {
                l0_total += 1;
                seen[i] = true;
            }
        }
    }
    Ok(SparsityStats {
        mean_l0: l0_total as f64 / instances.rows() as f64,
        activated: seen.iter().filter(|&&s| s).count(),
    })
}
