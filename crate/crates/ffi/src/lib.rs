//! C ABI over `spider-core`.
//!
//! Every fallible function returns a [`SpiderStatus`]; on failure a message
//! is available from [`spider_last_error`] on the calling thread. Objects
//! are opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use spider_core::dp::{self, DpQuery};
use spider_core::envelope::{self, Envelope, EnvelopeError, KeyPair};
use spider_core::pipeline::{self, PipelineConfig, PipelineError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpiderStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    InvalidKey = 3,
    EnvelopeFormat = 4,
    WrongRecipient = 5,
    AuthenticationFailure = 6,
    ConfigInvalid = 7,
    Pipeline = 8,
    Entropy = 9,
    Panic = 10,
}

/// An X25519 key pair.
pub struct SpiderKeyPair {
    inner: KeyPair,
}

/// Bytes owned by the library.
pub struct SpiderBuffer {
    bytes: Vec<u8>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: impl Into<String>) {
    let msg = CString::new(message.into().replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

struct Failure(SpiderStatus, String);

impl From<EnvelopeError> for Failure {
    fn from(e: EnvelopeError) -> Self {
        let status = match e {
            EnvelopeError::WrongRecipient => SpiderStatus::WrongRecipient,
            EnvelopeError::AuthenticationFailure => SpiderStatus::AuthenticationFailure,
            EnvelopeError::InvalidKey(_) => SpiderStatus::InvalidKey,
            EnvelopeError::EntropyFailure(_) => SpiderStatus::Entropy,
            _ => SpiderStatus::EnvelopeFormat,
        };
        Failure(status, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Envelope(inner) => inner.into(),
            PipelineError::ConfigInvalid(_) => Failure(SpiderStatus::ConfigInvalid, e.to_string()),
            other => Failure(SpiderStatus::Pipeline, other.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpiderStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SpiderStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpiderStatus::Panic
        }
    }
}

fn null() -> Failure {
    Failure(SpiderStatus::NullArgument, "null pointer argument".into())
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null());
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn key32(data: *const u8) -> Result<[u8; 32], Failure> {
    if data.is_null() {
        return Err(null());
    }
    let mut out = [0u8; 32];
    ptr::copy_nonoverlapping(data, out.as_mut_ptr(), 32);
    Ok(out)
}

unsafe fn text<'a>(s: *const c_char) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(null());
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| Failure(SpiderStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn give<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn spider_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spider_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `out` must be a valid pointer to write the handle to.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_generate(out: *mut *mut SpiderKeyPair) -> SpiderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let inner = envelope::generate_keypair(&mut OsRng)?;
        give(out, SpiderKeyPair { inner });
        Ok(())
    })
}

/// # Safety
/// `secret` must point to 32 readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_from_secret(
    secret: *const u8,
    out: *mut *mut SpiderKeyPair,
) -> SpiderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let inner = KeyPair::from_secret_bytes(key32(secret)?);
        give(out, SpiderKeyPair { inner });
        Ok(())
    })
}

/// Writes the 32-byte public key.
///
/// # Safety
/// `kp` must be a live handle; `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_public_key(kp: *const SpiderKeyPair, out: *mut u8) -> SpiderStatus {
    guard(|| {
        let kp = kp.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping(kp.inner.public_key().as_ptr(), out, 32);
        Ok(())
    })
}

/// Writes the 32-byte secret key.
///
/// # Safety
/// `kp` must be a live handle; `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_secret_key(kp: *const SpiderKeyPair, out: *mut u8) -> SpiderStatus {
    guard(|| {
        let kp = kp.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping(kp.inner.secret_bytes().as_ptr(), out, 32);
        Ok(())
    })
}

/// Writes the SHA-256 fingerprint of the public key (32 bytes).
///
/// # Safety
/// `kp` must be a live handle; `out` must point to 32 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_fingerprint(kp: *const SpiderKeyPair, out: *mut u8) -> SpiderStatus {
    guard(|| {
        let kp = kp.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        ptr::copy_nonoverlapping(kp.inner.fingerprint().as_ptr(), out, 32);
        Ok(())
    })
}

/// # Safety
/// `kp` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spider_keypair_free(kp: *mut SpiderKeyPair) {
    if !kp.is_null() {
        drop(Box::from_raw(kp));
    }
}

/// # Safety
/// `buf` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spider_buffer_data(buf: *const SpiderBuffer) -> *const u8 {
    buf.as_ref().map_or(ptr::null(), |b| b.bytes.as_ptr())
}

/// # Safety
/// `buf` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn spider_buffer_len(buf: *const SpiderBuffer) -> usize {
    buf.as_ref().map_or(0, |b| b.bytes.len())
}

/// # Safety
/// `buf` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spider_buffer_free(buf: *mut SpiderBuffer) {
    if !buf.is_null() {
        drop(Box::from_raw(buf));
    }
}

/// Seals `plaintext` to a 32-byte X25519 public key.
///
/// # Safety
/// `plaintext` must point to `len` readable bytes (may be NULL when `len` is
/// 0), `recipient` to 32 bytes, and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spider_seal(
    plaintext: *const u8,
    len: usize,
    recipient: *const u8,
    out: *mut *mut SpiderBuffer,
) -> SpiderStatus {
    guard(|| {
        if out.is_null() {
            return Err(null());
        }
        let env = envelope::seal(bytes(plaintext, len)?, &key32(recipient)?, &mut OsRng)?;
        give(out, SpiderBuffer { bytes: env.to_bytes() });
        Ok(())
    })
}

/// # Safety
/// `data` must point to `len` readable bytes, `kp` must be a live handle and
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spider_open(
    data: *const u8,
    len: usize,
    kp: *const SpiderKeyPair,
    out: *mut *mut SpiderBuffer,
) -> SpiderStatus {
    guard(|| {
        let kp = kp.as_ref().ok_or_else(null)?;
        if out.is_null() {
            return Err(null());
        }
        let plain = envelope::open_bytes(bytes(data, len)?, &kp.inner)?;
        give(out, SpiderBuffer { bytes: plain });
        Ok(())
    })
}

/// Hex SHA-256 of `salt || value`, written as 64 ASCII bytes.
///
/// # Safety
/// `value` must be NUL-terminated, `salt` must point to `salt_len` bytes and
/// `out` must point to 64 writable bytes.
#[no_mangle]
pub unsafe extern "C" fn spider_pseudonym(
    value: *const c_char,
    salt: *const u8,
    salt_len: usize,
    out: *mut c_char,
) -> SpiderStatus {
    guard(|| {
        let value = text(value)?;
        if out.is_null() {
            return Err(null());
        }
        let digest = spider_core::classical::pseudonym(value, bytes(salt, salt_len)?);
        ptr::copy_nonoverlapping(digest.as_ptr().cast(), out, 64);
        Ok(())
    })
}

/// Fills `out` with `n` Laplace(0, `scale_b`) draws from a generator seeded
/// with `seed`.
///
/// # Safety
/// `out` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn spider_laplace_samples(scale_b: f64, seed: u64, out: *mut f64, n: usize) -> SpiderStatus {
    guard(|| {
        if !(scale_b > 0.0 && scale_b.is_finite()) {
            return Err(Failure(SpiderStatus::InvalidArgument, "scale_b must be positive".into()));
        }
        if n == 0 {
            return Ok(());
        }
        if out.is_null() {
            return Err(null());
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        for x in slice::from_raw_parts_mut(out, n) {
            *x = dp::laplace_sample(scale_b, &mut rng);
        }
        Ok(())
    })
}

/// L1 sensitivity of a JSON-encoded query.
///
/// # Safety
/// `query_json` must be NUL-terminated and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn spider_sensitivity(query_json: *const c_char, out: *mut f64) -> SpiderStatus {
    guard(|| {
        let q: DpQuery = serde_json::from_str(text(query_json)?)
            .map_err(|e| Failure(SpiderStatus::InvalidArgument, e.to_string()))?;
        if out.is_null() {
            return Err(null());
        }
        *out = dp::sensitivity(&q)
            .map_err(|e| Failure(SpiderStatus::InvalidArgument, e.to_string()))?
            .value();
        Ok(())
    })
}

/// Runs the pipeline described by `config_json` on a sealed input. Writes
/// the sealed output and the JSON run report. Hierarchy paths in the config
/// resolve against the working directory.
///
/// # Safety
/// `config_json` must be NUL-terminated, `input` must point to `input_len`
/// bytes, `enclave` must be a live handle and both out pointers writable.
#[no_mangle]
pub unsafe extern "C" fn spider_run_pipeline(
    config_json: *const c_char,
    input: *const u8,
    input_len: usize,
    enclave: *const SpiderKeyPair,
    out_envelope: *mut *mut SpiderBuffer,
    out_report: *mut *mut SpiderBuffer,
) -> SpiderStatus {
    guard(|| {
        let enclave = enclave.as_ref().ok_or_else(null)?;
        if out_envelope.is_null() || out_report.is_null() {
            return Err(null());
        }
        let plan = PipelineConfig::from_json(text(config_json)?)?.resolve(None)?;
        let input = Envelope::from_bytes(bytes(input, input_len)?)?;
        let (sealed, report) = pipeline::run_pipeline(&plan, &input, &enclave.inner, &mut OsRng)?;
        let report = serde_json::to_vec(&report).expect("serializable");
        give(out_envelope, SpiderBuffer { bytes: sealed.to_bytes() });
        give(out_report, SpiderBuffer { bytes: report });
        Ok(())
    })
}
