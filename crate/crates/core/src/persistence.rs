//! Model bundles, sealed detector state, and the directory-backed sync stub.
//!
//! Bundle layout (all integers and floats little-endian):
//!
//! ```text
//! "SODM" | u16 version | u16 section count
//! per section: u16 name length | name | u64 payload length | payload
//! sections, in order: meta, autoencoder, service, calibration, detector
//! ```
//!
//! Sealed state layout:
//!
//! ```text
//! "SODX" | u16 version | 24-byte nonce | XSalsa20-Poly1305 ciphertext and tag
//! ```

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crypto_secretbox::aead::{Aead, AeadCore, KeyInit, OsRng};
use crypto_secretbox::{Key, Nonce, XSalsa20Poly1305};

use crate::autoencoder::Autoencoder;
use crate::codec::{Reader, Writer};
use crate::detector::{CalibrationTable, ComponentRange, DetectorConfig, DetectorState, Verdict};
use crate::error::{Error, Result};
use crate::forest::{DecisionTree, Node, RandomForest};
use crate::nn::{Activation, Dense, Network};
use crate::numeric::Matrix;
use crate::service::{ServiceKind, ServiceModel, ServiceParams};

pub const BUNDLE_MAGIC: &[u8; 4] = b"SODM";
pub const BUNDLE_VERSION: u16 = 1;
pub const STATE_MAGIC: &[u8; 4] = b"SODX";
pub const STATE_VERSION: u16 = 1;
pub const NONCE_LEN: usize = 24;
const TAG_LEN: usize = 16;
const SECTIONS: [&str; 5] = ["meta", "autoencoder", "service", "calibration", "detector"];

/// Environment variable holding the hex-encoded state key.
pub const KEY_ENV: &str = "LEAKGUARD_KEY";
/// Default number of queries between sync uploads.
pub const DEFAULT_SYNC_EVERY: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub name: String,
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub feature_min: Vec<f64>,
    pub feature_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub meta: DatasetMeta,
    pub autoencoder: Autoencoder,
    pub service: ServiceModel,
    pub calibration: CalibrationTable,
    pub detector: DetectorConfig,
}

impl ModelBundle {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if self.autoencoder.input_dim() != m.input_dim || self.autoencoder.latent_dim() != m.latent_dim {
            return Err(Error::format("autoencoder", "dimensions disagree with meta"));
        }
        if self.service.input_dim() != m.latent_dim || self.service.num_classes() != m.num_classes {
            return Err(Error::format("service", "dimensions disagree with meta"));
        }
        if m.feature_min.len() != m.input_dim || m.feature_max.len() != m.input_dim {
            return Err(Error::format("meta", "feature ranges disagree with input dimension"));
        }
        if self.calibration.horizon() == 0 {
            return Err(Error::format("calibration", "empty calibration table"));
        }
        self.detector
            .validate()
            .map_err(|e| Error::format("detector", e.to_string()))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Writer::new();
        out.bytes(BUNDLE_MAGIC);
        out.u16(BUNDLE_VERSION);
        out.u16(SECTIONS.len() as u16);
        let payloads = [
            encode_meta(&self.meta),
            encode_network_pair(&self.autoencoder),
            encode_service(&self.service),
            encode_calibration(&self.calibration),
            encode_detector(&self.detector),
        ];
        for (name, payload) in SECTIONS.iter().zip(payloads) {
            out.u16(name.len() as u16);
            out.bytes(name.as_bytes());
            out.len(payload.len());
            out.bytes(&payload);
        }
        Ok(out.into_bytes())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "header");
        if r.take(4)? != BUNDLE_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u16()?;
        if version != BUNDLE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let count = r.u16()? as usize;
        if count != SECTIONS.len() {
            return Err(r.error(format!("expected {} sections, found {count}", SECTIONS.len())));
        }
        let mut payloads = Vec::with_capacity(count);
        for expected in SECTIONS {
            let name_len = r.u16()? as usize;
            let name = r.take(name_len)?;
            if name != expected.as_bytes() {
                return Err(Error::format(expected, "section missing or out of order"));
            }
            let len = r.len(1)?;
            payloads.push(r.take(len)?);
        }
        r.finish()?;
        let bundle = Self {
            meta: decode_meta(&mut Reader::new(payloads[0], "meta"))?,
            autoencoder: decode_autoencoder(&mut Reader::new(payloads[1], "autoencoder"))?,
            service: decode_service(&mut Reader::new(payloads[2], "service"))?,
            calibration: decode_calibration(&mut Reader::new(payloads[3], "calibration"))?,
            detector: decode_detector(&mut Reader::new(payloads[4], "detector"))?,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    write_atomic(path, &bundle.to_bytes()?)
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelBundle::from_bytes(&bytes)
}

/// Writes to a sibling temp file, syncs it, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

fn expect(r: &Reader<'_>, ok: bool, msg: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(r.error(msg))
    }
}

fn encode_meta(m: &DatasetMeta) -> Vec<u8> {
    let mut w = Writer::new();
    w.str(&m.name);
    w.len(m.input_dim);
    w.len(m.latent_dim);
    w.len(m.num_classes);
    w.f64s(&m.feature_min);
    w.f64s(&m.feature_max);
    w.into_bytes()
}

fn decode_meta(r: &mut Reader<'_>) -> Result<DatasetMeta> {
    let meta = DatasetMeta {
        name: r.str()?,
        input_dim: r.u64()? as usize,
        latent_dim: r.u64()? as usize,
        num_classes: r.u64()? as usize,
        feature_min: r.f64s()?,
        feature_max: r.f64s()?,
    };
    r.finish()?;
    Ok(meta)
}

fn encode_dense(w: &mut Writer, d: &Dense) {
    w.len(d.inputs());
    w.len(d.outputs());
    w.u8(d.activation.tag());
    for &v in d.weights.data() {
        w.f64(v);
    }
    for &v in &d.bias {
        w.f64(v);
    }
}

fn decode_dense(r: &mut Reader<'_>) -> Result<Dense> {
    let inputs = r.len(8)?;
    let outputs = r.len(8)?;
    let activation = Activation::from_tag(r.u8()?).ok_or_else(|| r.error("unknown activation"))?;
    let count = inputs
        .checked_mul(outputs)
        .ok_or_else(|| r.error("layer too large"))?;
    expect(r, count > 0, "empty layer")?;
    let weights: Vec<f64> = (0..count).map(|_| r.f64()).collect::<Result<_>>()?;
    let bias: Vec<f64> = (0..outputs).map(|_| r.f64()).collect::<Result<_>>()?;
    let weights = Matrix::new(outputs, inputs, weights).map_err(|e| r.error(e.to_string()))?;
    expect(r, bias.iter().all(|v| v.is_finite()), "non-finite bias")?;
    Ok(Dense {
        weights,
        bias,
        activation,
    })
}

fn encode_network(w: &mut Writer, net: &Network) {
    w.len(net.layers.len());
    for layer in &net.layers {
        encode_dense(w, layer);
    }
}

fn decode_network(r: &mut Reader<'_>) -> Result<Network> {
    let n = r.len(1)?;
    expect(r, n > 0, "network has no layers")?;
    let layers = (0..n).map(|_| decode_dense(r)).collect::<Result<Vec<_>>>()?;
    Network::new(layers).map_err(|e| r.error(e.to_string()))
}

fn encode_network_pair(ae: &Autoencoder) -> Vec<u8> {
    let mut w = Writer::new();
    encode_network(&mut w, ae.encoder());
    encode_network(&mut w, ae.decoder());
    w.into_bytes()
}

fn decode_autoencoder(r: &mut Reader<'_>) -> Result<Autoencoder> {
    let encoder = decode_network(r)?;
    let decoder = decode_network(r)?;
    r.finish()?;
    Autoencoder::new(encoder, decoder).map_err(|e| r.error(e.to_string()))
}

fn encode_service(model: &ServiceModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(model.kind().tag());
    w.len(model.input_dim());
    w.len(model.num_classes());
    match model.params() {
        ServiceParams::Softmax(d) => encode_dense(&mut w, d),
        ServiceParams::Mlp(n) => encode_network(&mut w, n),
        ServiceParams::Forest(f) => {
            w.len(f.trees().len());
            for tree in f.trees() {
                w.len(tree.nodes().len());
                for node in tree.nodes() {
                    match node {
                        Node::Split {
                            feature,
                            threshold,
                            left,
                            right,
                        } => {
                            w.u8(0);
                            w.len(*feature);
                            w.f64(*threshold);
                            w.len(*left);
                            w.len(*right);
                        }
                        Node::Leaf { counts } => {
                            w.u8(1);
                            for &c in counts {
                                w.u32(c);
                            }
                        }
                    }
                }
            }
        }
    }
    w.into_bytes()
}

fn decode_service(r: &mut Reader<'_>) -> Result<ServiceModel> {
    let kind = ServiceKind::from_tag(r.u8()?).ok_or_else(|| r.error("unknown model kind"))?;
    let input_dim = r.u64()? as usize;
    let classes = r.u64()? as usize;
    let params = match kind {
        ServiceKind::SoftmaxRegression => ServiceParams::Softmax(decode_dense(r)?),
        ServiceKind::Mlp => ServiceParams::Mlp(decode_network(r)?),
        ServiceKind::RandomForest => {
            let n_trees = r.len(1)?;
            let mut trees = Vec::with_capacity(n_trees);
            for _ in 0..n_trees {
                let n_nodes = r.len(1)?;
                let mut nodes = Vec::with_capacity(n_nodes);
                for _ in 0..n_nodes {
                    nodes.push(match r.u8()? {
                        0 => Node::Split {
                            feature: r.u64()? as usize,
                            threshold: r.f64()?,
                            left: r.u64()? as usize,
                            right: r.u64()? as usize,
                        },
                        1 => Node::Leaf {
                            counts: (0..classes).map(|_| r.u32()).collect::<Result<_>>()?,
                        },
                        _ => return Err(r.error("unknown node tag")),
                    });
                }
                trees.push(
                    DecisionTree::from_nodes(nodes, input_dim, classes).map_err(|e| r.error(e.to_string()))?,
                );
            }
            ServiceParams::Forest(RandomForest::new(trees, classes).map_err(|e| r.error(e.to_string()))?)
        }
    };
    r.finish()?;
    ServiceModel::new(params, classes, input_dim).map_err(|e| r.error(e.to_string()))
}

fn encode_calibration(cal: &CalibrationTable) -> Vec<u8> {
    let mut w = Writer::new();
    for range in [&cal.reconstruction, &cal.distance, &cal.entropy] {
        w.f64s(&range.min);
        w.f64s(&range.max);
    }
    w.f64s(&cal.reference);
    w.into_bytes()
}

fn decode_calibration(r: &mut Reader<'_>) -> Result<CalibrationTable> {
    let mut range = || -> Result<ComponentRange> {
        Ok(ComponentRange {
            min: r.f64s()?,
            max: r.f64s()?,
        })
    };
    let (rec, dist, ent) = (range()?, range()?, range()?);
    let reference = r.f64s()?;
    r.finish()?;
    CalibrationTable::new(rec, dist, ent, reference).map_err(|e| r.error(e.to_string()))
}

fn encode_detector(cfg: &DetectorConfig) -> Vec<u8> {
    let mut w = Writer::new();
    w.f64(cfg.alpha);
    w.f64(cfg.beta);
    w.f64(cfg.gamma);
    w.f64(cfg.delta);
    w.len(cfg.max_horizon);
    w.into_bytes()
}

fn decode_detector(r: &mut Reader<'_>) -> Result<DetectorConfig> {
    let (alpha, beta, gamma, delta) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let horizon = r.u64()? as usize;
    r.finish()?;
    DetectorConfig::new(alpha, beta, gamma, delta, horizon).map_err(|e| r.error(e.to_string()))
}

/// 32-byte symmetric key for sealing detector state.
#[derive(Clone, PartialEq, Eq)]
pub struct StateKey([u8; 32]);

impl fmt::Debug for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("StateKey(..)")
    }
}

impl StateKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn generate() -> Self {
        Self(XSalsa20Poly1305::generate_key(&mut OsRng).into())
    }

    /// Parses exactly 64 hex digits.
    pub fn from_hex(hex: &str) -> Result<Self> {
        let hex = hex.trim();
        if hex.len() != 64 || !hex.is_ascii() {
            return Err(Error::domain("state key must be 64 hex digits"));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::domain("state key must be 64 hex digits"))?;
        }
        Ok(Self(out))
    }

    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Reads the key from [`KEY_ENV`].
    pub fn from_env() -> Result<Self> {
        let hex = std::env::var(KEY_ENV)
            .map_err(|_| Error::domain(format!("{KEY_ENV} is not set")))?;
        Self::from_hex(&hex)
    }

    fn cipher(&self) -> XSalsa20Poly1305 {
        XSalsa20Poly1305::new(Key::from_slice(&self.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedState {
    pub version: u16,
    pub nonce: [u8; NONCE_LEN],
    /// Ciphertext followed by the 16-byte tag.
    pub ciphertext: Vec<u8>,
}

impl EncryptedState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(STATE_MAGIC);
        w.u16(self.version);
        w.bytes(&self.nonce);
        w.bytes(&self.ciphertext);
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "state header");
        if r.take(4)? != STATE_MAGIC {
            return Err(r.error("bad magic"));
        }
        let version = r.u16()?;
        if version != STATE_VERSION {
            return Err(r.error(format!("unsupported version {version}")));
        }
        let nonce: [u8; NONCE_LEN] = r.take(NONCE_LEN)?.try_into().expect("exact length");
        let ciphertext = r.take(bytes.len() - 4 - 2 - NONCE_LEN)?.to_vec();
        if ciphertext.len() < TAG_LEN {
            return Err(r.error("ciphertext shorter than the authentication tag"));
        }
        Ok(Self {
            version,
            nonce,
            ciphertext,
        })
    }
}

pub(crate) fn encode_state(state: &DetectorState) -> Vec<u8> {
    let mut w = Writer::new();
    let latent = state.encoded_history().first().map_or(0, Vec::len);
    w.len(state.class_counts().len());
    w.len(latent);
    w.len(state.t());
    w.f64(state.r_cum());
    w.f64(state.d_cum());
    for &c in state.class_counts() {
        w.u64(c);
    }
    for z in state.encoded_history() {
        for &v in z {
            w.f64(v);
        }
    }
    for v in state.verdicts() {
        w.u8(u8::from(v.is_adversarial()));
    }
    w.into_bytes()
}

pub(crate) fn decode_state(bytes: &[u8]) -> Result<DetectorState> {
    let mut r = Reader::new(bytes, "state");
    let classes = r.len(8)?;
    let latent = r.u64()? as usize;
    let t = r.len(1)?;
    let (r_cum, d_cum) = (r.f64()?, r.f64()?);
    let counts = (0..classes).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let per_row = latent.checked_mul(8).ok_or_else(|| r.error("latent too large"))?;
    expect(&r, t.saturating_mul(per_row) <= bytes.len(), "history exceeds payload")?;
    let history = (0..t)
        .map(|_| (0..latent).map(|_| r.f64()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let verdicts = (0..t)
        .map(|_| match r.u8()? {
            0 => Ok(Verdict::Benign),
            1 => Ok(Verdict::Adversarial),
            _ => Err(r.error("unknown verdict byte")),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    DetectorState::from_parts(r_cum, d_cum, counts, history, verdicts).map_err(|e| r.error(e.to_string()))
}

/// Encrypts the state under a fresh random nonce.
pub fn seal_state(state: &DetectorState, key: &StateKey) -> Result<EncryptedState> {
    let nonce = XSalsa20Poly1305::generate_nonce(&mut OsRng);
    let ciphertext = key
        .cipher()
        .encrypt(&nonce, encode_state(state).as_slice())
        .map_err(|_| Error::domain("encryption failed"))?;
    Ok(EncryptedState {
        version: STATE_VERSION,
        nonce: nonce.into(),
        ciphertext,
    })
}

/// Fails with [`Error::Tamper`] on a wrong key or any modified byte.
pub fn open_state(blob: &EncryptedState, key: &StateKey) -> Result<DetectorState> {
    if blob.version != STATE_VERSION {
        return Err(Error::format("state header", format!("unsupported version {}", blob.version)));
    }
    let plain = key
        .cipher()
        .decrypt(Nonce::from_slice(&blob.nonce), blob.ciphertext.as_slice())
        .map_err(|_| Error::Tamper)?;
    decode_state(&plain)
}

pub fn write_state(path: &Path, blob: &EncryptedState) -> Result<()> {
    write_atomic(path, &blob.to_bytes())
}

pub fn read_state(path: &Path) -> Result<EncryptedState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    EncryptedState::from_bytes(&bytes)
}

fn sync_sequence(name: &str) -> Option<u64> {
    let digits = name.strip_prefix("state.")?.strip_suffix(".sodx")?;
    if digits.len() != 8 || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// Synced blobs in `dir`, newest first.
pub fn synced_blobs(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        if let Some(seq) = entry.file_name().to_str().and_then(sync_sequence) {
            out.push((seq, entry.path()));
        }
    }
    out.sort_by(|a, b| b.0.cmp(&a.0));
    Ok(out)
}

/// Copies `blob` into `dir` as `state.<seq>.sodx`, one past the highest sequence present.
pub fn sync_state(blob: &EncryptedState, dir: &Path) -> Result<PathBuf> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "sync directory does not exist"),
        ));
    }
    let next = synced_blobs(dir)?.first().map_or(1, |(seq, _)| seq + 1);
    let path = dir.join(format!("state.{next:08}.sodx"));
    write_state(&path, blob)?;
    Ok(path)
}

/// Newest synced blob that parses and authenticates.
pub fn recover_state(dir: &Path, key: &StateKey) -> Result<Option<(PathBuf, DetectorState)>> {
    for (_, path) in synced_blobs(dir)? {
        if let Ok(state) = read_state(&path).and_then(|blob| open_state(&blob, key)) {
            return Ok(Some((path, state)));
        }
    }
    Ok(None)
}

/// Local sealed state file plus optional periodic sync.
#[derive(Debug, Clone)]
pub struct SessionStore {
    pub path: PathBuf,
    pub sync_dir: Option<PathBuf>,
    pub sync_every: usize,
    key: StateKey,
}

impl SessionStore {
    pub fn new(path: PathBuf, sync_dir: Option<PathBuf>, key: StateKey) -> Self {
        Self {
            path,
            sync_dir,
            sync_every: DEFAULT_SYNC_EVERY,
            key,
        }
    }

    /// The local state if present; otherwise the newest synced copy; otherwise
    /// a fresh state. A local file that fails authentication is an error.
    pub fn load(&self, num_classes: usize) -> Result<DetectorState> {
        if self.path.exists() {
            return open_state(&read_state(&self.path)?, &self.key);
        }
        if let Some(dir) = &self.sync_dir {
            if let Some((_, state)) = recover_state(dir, &self.key)? {
                return Ok(state);
            }
        }
        Ok(DetectorState::new(num_classes))
    }

    /// Seals to the local file; syncs when `t` is a multiple of `sync_every`.
    pub fn persist(&self, state: &DetectorState) -> Result<()> {
        let blob = seal_state(state, &self.key)?;
        write_state(&self.path, &blob)?;
        if let Some(dir) = &self.sync_dir {
            if self.sync_every > 0 && state.t() > 0 && state.t() % self.sync_every == 0 {
                sync_state(&blob, dir)?;
            }
        }
        Ok(())
    }

    /// Unconditional sync, e.g. at session end.
    pub fn sync_now(&self, state: &DetectorState) -> Result<Option<PathBuf>> {
        match &self.sync_dir {
            Some(dir) => Ok(Some(sync_state(&seal_state(state, &self.key)?, dir)?)),
            None => Ok(None),
        }
    }
}
