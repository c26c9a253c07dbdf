//! Cross and weave transfer units: secure elementwise mixing of activation
//! maps under a degree matrix Θ, forward and backward.
//!
//! At every location the domains' activations form a vector
//! `V = (x_1, …, x_n)`; domain `i` receives `x̃_i = Θ_i · V`. The plaintext
//! routines here are both the reference semantics and the oracle against
//! which the secure path is tested. The secure path quantizes, shares,
//! mixes and opens every location under a single batched MAC check per unit
//! invocation; nothing is returned unless that check passed.

use crate::dealer::PreprocSource;
use crate::protocol::ProtocolParty;
use crate::ring::{FixedPointCodec, RingElement};
use crate::sharing::{AuthShare, PartyId};
use crate::transport::Transport;
use crate::{Error, Result};

/// Symmetric n×n transfer-weight matrix with entries in [0, 1]. Diagonal
/// entries weigh a domain's own representations, off-diagonal ones what it
/// absorbs from the others.
#[derive(Clone, Debug, PartialEq)]
pub struct DegreeMatrix {
    n: usize,
    entries: Vec<f64>, // row-major
}

impl DegreeMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<DegreeMatrix> {
        let n = rows.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("degree matrix must be square".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for row in rows {
            entries.extend_from_slice(row);
        }
        let m = DegreeMatrix { n, entries };
        for i in 0..n {
            for j in 0..n {
                let v = m.get(i, j);
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!(
                        "theta[{}][{}] = {v} outside [0, 1]",
                        i + 1,
                        j + 1
                    )));
                }
                if (m.get(i, j) - m.get(j, i)).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "degree matrix not symmetric at [{}][{}]",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(m)
    }

    pub fn identity(n: usize) -> DegreeMatrix {
        let mut entries = vec![0.0; n * n];
        for i in 0..n {
            entries[i * n + i] = 1.0;
        }
        DegreeMatrix { n, entries }
    }

    /// Row-stochastic default: every off-diagonal entry is `theta_t`, the
    /// diagonal absorbs the rest (`θ_s = 1 − Σ θ_t`).
    pub fn uniform_transfer(n: usize, theta_t: f64) -> Result<DegreeMatrix> {
        let theta_s = 1.0 - theta_t * (n as f64 - 1.0);
        if !(0.0..=1.0).contains(&theta_s) {
            return Err(Error::Config(format!(
                "theta_t = {theta_t} leaves no valid diagonal for n = {n}"
            )));
        }
        let mut entries = vec![theta_t; n * n];
        for i in 0..n {
            entries[i * n + i] = theta_s;
        }
        Ok(DegreeMatrix { n, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }
}

/// An h×w×c activation map in real form.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor {
    pub shape: [usize; 3],
    pub data: Vec<f64>,
}

impl ActivationTensor {
    pub fn new(shape: [usize; 3], data: Vec<f64>) -> ActivationTensor {
        assert_eq!(shape[0] * shape[1] * shape[2], data.len());
        ActivationTensor { shape, data }
    }

    pub fn zeros(shape: [usize; 3]) -> ActivationTensor {
        ActivationTensor {
            shape,
            data: vec![0.0; shape[0] * shape[1] * shape[2]],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An activation map at the secure boundary: fixed-point ring elements.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub shape: [usize; 3],
    pub data: Vec<RingElement>,
}

/// Elementwise quantization with location context on failure.
pub fn quantize_tensor(x: &ActivationTensor, codec: &FixedPointCodec) -> Result<QuantizedTensor> {
    let mut data = Vec::with_capacity(x.len());
    for (idx, &v) in x.data.iter().enumerate() {
        let q = codec.quantize_ctx(v, &format!("tensor element {idx} of shape {:?}", x.shape))?;
        data.push(q);
    }
    Ok(QuantizedTensor {
        shape: x.shape,
        data,
    })
}

pub fn dequantize_tensor(x: &QuantizedTensor, codec: &FixedPointCodec) -> ActivationTensor {
    ActivationTensor {
        shape: x.shape,
        data: x.data.iter().map(|&q| codec.dequantize(q)).collect(),
    }
}

fn check_shapes(tensors: &[&ActivationTensor], context: &str) -> Result<()> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::Protocol(format!("{context}: no tensors")))?;
    for t in tensors {
        if t.shape != first.shape {
            return Err(Error::ShapeMismatch {
                expected: first.shape,
                got: t.shape,
                context: context.to_string(),
            });
        }
    }
    Ok(())
}

/// Plaintext n-domain mix: output `i` is `Σ_j θ_ij · input_j`, elementwise.
pub fn weave_forward_plain(
    inputs: &[ActivationTensor],
    theta: &DegreeMatrix,
) -> Result<Vec<ActivationTensor>> {
    if inputs.len() != theta.n() {
        return Err(Error::Config(format!(
            "{} tensors for an n = {} degree matrix",
            inputs.len(),
            theta.n()
        )));
    }
    check_shapes(&inputs.iter().collect::<Vec<_>>(), "weave_forward_plain")?;
    let len = inputs[0].len();
    let mut outputs = Vec::with_capacity(theta.n());
    for dest in 0..theta.n() {
        let mut data = vec![0.0; len];
        for (j, input) in inputs.iter().enumerate() {
            let w = theta.get(dest, j);
            if w == 0.0 {
                continue;
            }
            for (o, &x) in data.iter_mut().zip(&input.data) {
                *o += w * x;
            }
        }
        outputs.push(ActivationTensor {
            shape: inputs[0].shape,
            data,
        });
    }
    Ok(outputs)
}

/// Two-domain cross unit, plaintext: `(x̃_1, x̃_2) = Θ · (x_1, x_2)`.
pub fn cross_forward_plain(
    x1: &ActivationTensor,
    x2: &ActivationTensor,
    theta: &DegreeMatrix,
) -> Result<(ActivationTensor, ActivationTensor)> {
    if theta.n() != 2 {
        return Err(Error::Config("cross unit needs a 2x2 degree matrix".into()));
    }
    let mut out = weave_forward_plain(&[x1.clone(), x2.clone()], theta)?;
    let b = out.pop().unwrap();
    let a = out.pop().unwrap();
    Ok((a, b))
}

/// Backward through the mix: per location the gradient vector is
/// `Θᵀ · (∂L/∂X̃)`; Θ is symmetric so this is the transposed product spelled
/// out explicitly.
pub fn weave_backward(
    grad_out: &[ActivationTensor],
    theta: &DegreeMatrix,
) -> Result<Vec<ActivationTensor>> {
    if grad_out.len() != theta.n() {
        return Err(Error::Config(format!(
            "{} gradient tensors for an n = {} degree matrix",
            grad_out.len(),
            theta.n()
        )));
    }
    check_shapes(&grad_out.iter().collect::<Vec<_>>(), "weave_backward")?;
    let len = grad_out[0].len();
    let mut outputs = Vec::with_capacity(theta.n());
    for src in 0..theta.n() {
        let mut data = vec![0.0; len];
        for (dest, g) in grad_out.iter().enumerate() {
            let w = theta.get(dest, src); // transposed indexing
            if w == 0.0 {
                continue;
            }
            for (o, &x) in data.iter_mut().zip(&g.data) {
                *o += w * x;
            }
        }
        outputs.push(ActivationTensor {
            shape: grad_out[0].shape,
            data,
        });
    }
    Ok(outputs)
}

/// Whether Θ rides along in public form or is itself secret-shared and
/// multiplied with Beaver triples. Public Θ is the default configuration;
/// the secret path is the full protocol exercised by tests and the
/// `secret_theta` config flag.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ThetaMode {
    Public,
    Secret,
}

/// Secure n-domain mix of one activation map per domain.
///
/// All parties call in lockstep with same-shape tensors. Every element of
/// every transferred map is opened only through the batched MAC check; a
/// failed check aborts the whole invocation and no partial tensor escapes.
pub fn weave_forward_secure<T: Transport, P: PreprocSource>(
    local: &ActivationTensor,
    theta: &DegreeMatrix,
    mode: ThetaMode,
    engine: &mut ProtocolParty<T, P>,
) -> Result<ActivationTensor> {
    let n = engine.n();
    if theta.n() != n {
        return Err(Error::Config(format!(
            "degree matrix is {}x{} but the run has n = {n}",
            theta.n(),
            theta.n()
        )));
    }
    let codec = engine.codec();

    // Shape agreement round.
    let mut meta = Vec::with_capacity(12);
    for d in local.shape {
        meta.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let shapes = engine.exchange_meta(meta)?;
    for p in PartyId::all(n) {
        let bytes = &shapes[p.slot()];
        if bytes.len() != 12 {
            return Err(Error::Protocol(format!("{p} announced a malformed shape")));
        }
        let got = [
            u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize,
            u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize,
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize,
        ];
        if got != local.shape {
            return Err(Error::ShapeMismatch {
                expected: local.shape,
                got,
                context: format!("weave unit input from {p}"),
            });
        }
    }

    let quantized = quantize_tensor(local, &codec)?;
    let len = quantized.data.len();
    let shared = engine.input_all(&quantized.data)?; // [owner][location]

    let my_slot = engine.me().slot();
    let raw = match mode {
        ThetaMode::Public => {
            // z^(i)[dest][loc] = Σ_j Q(θ_dest_j) · x_j^(i)[loc], locally.
            let q_theta: Vec<Vec<RingElement>> = (0..n)
                .map(|dest| {
                    theta
                        .row(dest)
                        .iter()
                        .map(|w| codec.quantize_ctx(*w, "degree matrix entry"))
                        .collect::<Result<_>>()
                })
                .collect::<Result<_>>()?;
            let mut z_shares = Vec::with_capacity(n * len);
            for q_row in &q_theta {
                for loc in 0..len {
                    let mut acc = AuthShare::ZERO;
                    for (j, w) in q_row.iter().enumerate() {
                        acc = acc.add(&shared[j][loc].mul_public(*w));
                    }
                    z_shares.push(acc);
                }
            }
            let opened = engine.open_batch_values(&z_shares)?;
            engine.mac_check(&mut [])?;
            opened[my_slot * len..(my_slot + 1) * len].to_vec()
        }
        ThetaMode::Secret => {
            // Rows of Θ are contributed by their owners as fresh shared
            // inputs, then every term is a Beaver multiplication.
            let my_row: Vec<RingElement> = theta
                .row(my_slot)
                .iter()
                .map(|w| codec.quantize_ctx(*w, "degree matrix entry"))
                .collect::<Result<_>>()?;
            let rows = engine.input_all(&my_row)?; // [owner][j]
            let mut pairs = Vec::with_capacity(n * len * n);
            for row in rows.iter().take(n) {
                for loc in 0..len {
                    for (j, theta_share) in row.iter().enumerate() {
                        pairs.push((shared[j][loc], *theta_share));
                    }
                }
            }
            let products = engine.beaver_mul_batch(&pairs)?;
            let mut z_shares = Vec::with_capacity(n * len);
            for chunk in products.chunks_exact(n) {
                let sum = chunk.iter().fold(AuthShare::ZERO, |acc, p| acc.add(p));
                z_shares.push(sum);
            }
            let opened = engine.open_batch_values(&z_shares)?;
            engine.mac_check(&mut [])?;
            opened[my_slot * len..(my_slot + 1) * len].to_vec()
        }
    };

    // Scale 2^{2p} -> 2^p, then back to floats.
    let data = raw
        .into_iter()
        .map(|z| codec.dequantize(codec.truncate(z)))
        .collect();
    Ok(ActivationTensor {
        shape: local.shape,
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dealer::{deal, PartyPreprocessing};
    use crate::transport::InProcessTransport;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::time::Duration;

    fn tensor_from(shape: [usize; 3], rng: &mut ChaCha8Rng) -> ActivationTensor {
        let len = shape[0] * shape[1] * shape[2];
        ActivationTensor::new(shape, (0..len).map(|_| rng.random_range(-1.5..1.5)).collect())
    }

    #[test]
    fn degree_matrix_validation() {
        assert!(DegreeMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).is_ok());
        assert!(DegreeMatrix::from_rows(&[vec![0.9, 0.2], vec![0.1, 0.9]]).is_err());
        assert!(DegreeMatrix::from_rows(&[vec![1.5, 0.0], vec![0.0, 1.0]]).is_err());
        assert!(DegreeMatrix::from_rows(&[vec![0.9, 0.1]]).is_err());
        let u = DegreeMatrix::uniform_transfer(5, 0.1).unwrap();
        assert!((u.get(0, 0) - 0.6).abs() < 1e-12);
        assert_eq!(u.get(0, 1), 0.1);
        assert!(DegreeMatrix::uniform_transfer(12, 0.1).is_err());
    }

    #[test]
    fn cross_identity_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1 = tensor_from([3, 3, 2], &mut rng);
        let x2 = tensor_from([3, 3, 2], &mut rng);
        let (t1, t2) = cross_forward_plain(&x1, &x2, &DegreeMatrix::identity(2)).unwrap();
        assert_eq!(t1, x1);
        assert_eq!(t2, x2);
    }

    #[test]
    fn cross_mixes_single_location() {
        // Θ from the two-domain experiment: own 0.9, transferred 0.1.
        let theta = DegreeMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let x1 = ActivationTensor::new([1, 1, 1], vec![1.0]);
        let x2 = ActivationTensor::new([1, 1, 1], vec![0.0]);
        let (t1, t2) = cross_forward_plain(&x1, &x2, &theta).unwrap();
        assert!((t1.data[0] - 0.9).abs() < 1e-15);
        assert!((t2.data[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn cross_equals_dense_matrix_product_per_location() {
        // Oracle: direct 2x2 matrix-vector product at every location.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let theta = DegreeMatrix::from_rows(&[vec![0.7, 0.3], vec![0.3, 0.7]]).unwrap();
        let x1 = tensor_from([4, 5, 3], &mut rng);
        let x2 = tensor_from([4, 5, 3], &mut rng);
        let (t1, t2) = cross_forward_plain(&x1, &x2, &theta).unwrap();
        for loc in 0..x1.len() {
            let v = [x1.data[loc], x2.data[loc]];
            assert!((t1.data[loc] - (0.7 * v[0] + 0.3 * v[1])).abs() < 1e-12);
            assert!((t2.data[loc] - (0.3 * v[0] + 0.7 * v[1])).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let x1 = ActivationTensor::zeros([2, 2, 1]);
        let x2 = ActivationTensor::zeros([2, 2, 2]);
        let err = cross_forward_plain(&x1, &x2, &DegreeMatrix::identity(2)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn backward_identity_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g: Vec<ActivationTensor> = (0..3).map(|_| tensor_from([2, 2, 2], &mut rng)).collect();
        let back = weave_backward(&g, &DegreeMatrix::identity(3)).unwrap();
        assert_eq!(back, g);

        let zeros: Vec<ActivationTensor> = (0..3).map(|_| ActivationTensor::zeros([2, 2, 2])).collect();
        let back = weave_backward(&zeros, &DegreeMatrix::uniform_transfer(3, 0.2).unwrap()).unwrap();
        assert_eq!(back, zeros);
    }

    /// Central-difference oracle (step 1e-5) for the full forward∘loss
    /// composition: L = Σ_i Σ_loc w_i[loc] · x̃_i[loc] so ∂L/∂x_j must match
    /// the weave backward of the per-output weights.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 2;
        let shape = [3, 2, 2];
        let theta = DegreeMatrix::from_rows(&[vec![0.8, 0.2], vec![0.2, 0.8]]).unwrap();
        let inputs: Vec<ActivationTensor> = (0..n).map(|_| tensor_from(shape, &mut rng)).collect();
        let weights: Vec<ActivationTensor> = (0..n).map(|_| tensor_from(shape, &mut rng)).collect();

        let loss = |inputs: &[ActivationTensor]| -> f64 {
            let out = weave_forward_plain(inputs, &theta).unwrap();
            out.iter()
                .zip(&weights)
                .map(|(o, w)| o.data.iter().zip(&w.data).map(|(a, b)| a * b).sum::<f64>())
                .sum()
        };

        let analytic = weave_backward(&weights, &theta).unwrap();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let mut probes = 0;
        for j in 0..n {
            for loc in 0..inputs[0].len() {
                let mut plus = inputs.clone();
                plus[j].data[loc] += h;
                let mut minus = inputs.clone();
                minus[j].data[loc] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let a = analytic[j].data[loc];
                let rel = (numeric - a).abs() / a.abs().max(1e-8);
                max_rel = max_rel.max(rel);
                probes += 1;
            }
        }
        assert!(probes >= 24);
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn forward_is_linear_in_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let theta = DegreeMatrix::uniform_transfer(3, 0.25).unwrap();
        let a: Vec<ActivationTensor> = (0..3).map(|_| tensor_from([2, 2, 1], &mut rng)).collect();
        let b: Vec<ActivationTensor> = (0..3).map(|_| tensor_from([2, 2, 1], &mut rng)).collect();
        let summed: Vec<ActivationTensor> = a
            .iter()
            .zip(&b)
            .map(|(x, y)| {
                ActivationTensor::new(
                    x.shape,
                    x.data.iter().zip(&y.data).map(|(u, v)| u + 2.0 * v).collect(),
                )
            })
            .collect();
        let lhs = weave_forward_plain(&summed, &theta).unwrap();
        let fa = weave_forward_plain(&a, &theta).unwrap();
        let fb = weave_forward_plain(&b, &theta).unwrap();
        for i in 0..3 {
            for loc in 0..lhs[i].len() {
                let want = fa[i].data[loc] + 2.0 * fb[i].data[loc];
                assert!((lhs[i].data[loc] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn row_stochastic_theta_conserves_identical_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = tensor_from([3, 3, 1], &mut rng);
        let inputs = vec![x.clone(), x.clone(), x.clone(), x.clone()];
        let theta = DegreeMatrix::uniform_transfer(4, 0.15).unwrap();
        let out = weave_forward_plain(&inputs, &theta).unwrap();
        for o in out {
            for loc in 0..x.len() {
                assert!((o.data[loc] - x.data[loc]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn quantize_tensor_round_trip_and_outlier() {
        let codec = FixedPointCodec::new(8).unwrap();
        let zero = ActivationTensor::zeros([2, 2, 2]);
        let q = quantize_tensor(&zero, &codec).unwrap();
        assert!(q.data.iter().all(|e| e.is_zero()));
        assert_eq!(dequantize_tensor(&q, &codec), zero);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = ActivationTensor::new(
            [4, 4, 2],
            (0..32).map(|_| rng.random_range(-3.0..3.0)).collect(),
        );
        let rt = dequantize_tensor(&quantize_tensor(&t, &codec).unwrap(), &codec);
        let max_err = t
            .data
            .iter()
            .zip(&rt.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 2f64.powi(-9) + 1e-15);

        // A 3.9-sigma outlier is far inside the representable range at p=8.
        let outlier = ActivationTensor::new([1, 1, 1], vec![3.9]);
        let q = quantize_tensor(&outlier, &codec).unwrap();
        assert_eq!(q.data[0].to_signed() as i64, (3.9f64 * 256.0).round() as i64);
        assert!(3.9 < codec.magnitude_bound());

        // Out-of-range errors carry the element index.
        let bad = ActivationTensor::new([1, 1, 2], vec![0.0, codec.magnitude_bound() * 2.0]);
        match quantize_tensor(&bad, &codec) {
            Err(Error::OutOfRange { context, .. }) => assert!(context.contains("element 1")),
            other => panic!("unexpected: {other:?}"),
        }
    }

    // ---- secure path ----

    type Engine = ProtocolParty<InProcessTransport, PartyPreprocessing>;

    fn run_weave(
        n: usize,
        theta: DegreeMatrix,
        mode: ThetaMode,
        shape: [usize; 3],
        seed: u64,
        triples: usize,
        masks: usize,
    ) -> (Vec<ActivationTensor>, Vec<ActivationTensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<ActivationTensor> = (0..n).map(|_| tensor_from(shape, &mut rng)).collect();
        let expected = weave_forward_plain(&inputs, &theta).unwrap();

        let bundle = deal(n, triples, masks, seed ^ 0x5eed);
        let transports = InProcessTransport::create(n, Duration::from_secs(20));
        let mut handles = Vec::new();
        for ((t, pp), input) in transports.into_iter().zip(bundle.parties).zip(inputs) {
            let theta = theta.clone();
            handles.push(std::thread::spawn(move || {
                let codec = FixedPointCodec::new(8).unwrap();
                let mut engine: Engine = ProtocolParty::new(t, pp, codec);
                weave_forward_secure(&input, &theta, mode, &mut engine).unwrap()
            }));
        }
        let got: Vec<ActivationTensor> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        (got, expected)
    }

    fn max_abs_diff(a: &[ActivationTensor], b: &[ActivationTensor]) -> f64 {
        a.iter()
            .zip(b)
            .flat_map(|(x, y)| x.data.iter().zip(&y.data).map(|(u, v)| (u - v).abs()))
            .fold(0.0, f64::max)
    }

    #[test]
    fn secure_identity_theta_is_near_exact() {
        let (got, expected) = run_weave(
            2,
            DegreeMatrix::identity(2),
            ThetaMode::Public,
            [3, 3, 2],
            11,
            0,
            64,
        );
        assert!(max_abs_diff(&got, &expected) <= 2f64.powi(-8));
    }

    #[test]
    fn secure_convex_rows_on_equal_inputs() {
        // Row (0.8, 0.1, 0.1) against all-ones inputs returns ones.
        let theta = DegreeMatrix::uniform_transfer(3, 0.1).unwrap();
        let inputs: Vec<ActivationTensor> =
            (0..3).map(|_| ActivationTensor::new([2, 2, 1], vec![1.0; 4])).collect();
        let expected = weave_forward_plain(&inputs, &theta).unwrap();
        let bundle = deal(3, 0, 16, 99);
        let transports = InProcessTransport::create(3, Duration::from_secs(20));
        let mut handles = Vec::new();
        for ((t, pp), input) in transports.into_iter().zip(bundle.parties).zip(inputs) {
            let theta = theta.clone();
            handles.push(std::thread::spawn(move || {
                let codec = FixedPointCodec::new(8).unwrap();
                let mut engine: Engine = ProtocolParty::new(t, pp, codec);
                weave_forward_secure(&input, &theta, ThetaMode::Public, &mut engine).unwrap()
            }));
        }
        let bound = 3.0 * 2f64.powi(-7);
        for (h, want) in handles.into_iter().zip(expected) {
            let got = h.join().unwrap();
            for (g, w) in got.data.iter().zip(&want.data) {
                assert!((g - w).abs() <= bound, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn secure_public_theta_tracks_plain_oracle() {
        let theta = DegreeMatrix::uniform_transfer(5, 0.1).unwrap();
        let (got, expected) = run_weave(5, theta, ThetaMode::Public, [4, 4, 3], 13, 0, 64);
        let bound = 5.0 * 2f64.powi(-7);
        assert!(max_abs_diff(&got, &expected) <= bound);
    }

    #[test]
    fn secure_secret_theta_tracks_plain_oracle() {
        let theta = DegreeMatrix::from_rows(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        // n^2 * len triples: 2x2 fixed, len = 8.
        let (got, expected) = run_weave(2, theta, ThetaMode::Secret, [2, 2, 2], 17, 64, 64);
        let bound = 2.0 * 2f64.powi(-7);
        assert!(max_abs_diff(&got, &expected) <= bound);
    }

    #[test]
    fn secure_weave_rejects_mismatched_shapes() {
        let bundle = deal(2, 0, 16, 101);
        let transports = InProcessTransport::create(2, Duration::from_secs(5));
        let theta = DegreeMatrix::identity(2);
        let mut handles = Vec::new();
        for (i, (t, pp)) in transports.into_iter().zip(bundle.parties).enumerate() {
            let theta = theta.clone();
            handles.push(std::thread::spawn(move || {
                let codec = FixedPointCodec::new(8).unwrap();
                let mut engine: Engine = ProtocolParty::new(t, pp, codec);
                let shape = if i == 0 { [2, 2, 1] } else { [2, 1, 2] };
                weave_forward_secure(
                    &ActivationTensor::zeros(shape),
                    &theta,
                    ThetaMode::Public,
                    &mut engine,
                )
            }));
        }
        for h in handles {
            assert!(matches!(
                h.join().unwrap(),
                Err(Error::ShapeMismatch { .. })
            ));
        }
    }
}
