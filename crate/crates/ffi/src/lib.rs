//! C ABI for the dense head, the model codec, and blob averaging.
//!
//! Heads are opaque `FhHead` handles created by `fh_head_new_*` or
//! `fh_head_decode*` and released with `fh_head_free`. Every fallible call
//! returns an `FhStatus`; outputs are written through pointer arguments only
//! on `FH_STATUS_OK`. Panics never cross the boundary: they surface as
//! `FH_STATUS_PANIC`.
//!
//! Parameters are `float` at this boundary, matching the wire format.

use std::ffi::c_char;
use std::panic::{self, AssertUnwindSafe};
use std::ptr;
use std::slice;

use fedhead::nn::softmax;
use fedhead::wire::{self, WireError};
use fedhead::{average_blobs, DenseHead, EmbeddingSample, Error, HeadShape, InitMode, ModelBlob};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A length or dimension did not match the head.
    Shape = 2,
    /// A label was outside `0..C`.
    Label = 3,
    /// An argument was out of range (zero dimensions, empty batch, bad rate).
    Usage = 4,
    /// Training produced a non-finite parameter; the head is unchanged.
    Numeric = 5,
    /// Model bytes were shorter or longer than their header implies.
    Truncated = 6,
    BadMagic = 7,
    /// Payload checksum mismatch.
    Corrupt = 8,
    /// Malformed frames or an unencodable model.
    Encoding = 9,
    /// Output buffer too small; the required size was written.
    BufferTooSmall = 10,
    Panic = 11,
    Internal = 12,
}

/// Opaque head handle.
pub struct FhHead {
    inner: DenseHead,
}

fn status_of(err: &Error) -> FhStatus {
    match err {
        Error::Shape { .. } => FhStatus::Shape,
        Error::LabelOutOfRange { .. } => FhStatus::Label,
        Error::Usage(_) => FhStatus::Usage,
        Error::Numeric(_) => FhStatus::Numeric,
        Error::Wire(w) => wire_status(w),
        _ => FhStatus::Internal,
    }
}

fn wire_status(err: &WireError) -> FhStatus {
    match err {
        WireError::BadMagic(_) => FhStatus::BadMagic,
        WireError::Truncated { .. } => FhStatus::Truncated,
        WireError::Corrupt { .. } => FhStatus::Corrupt,
        _ => FhStatus::Encoding,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FhStatus>) -> FhStatus {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FhStatus::Ok,
        Ok(Err(status)) => status,
        Err(_) => FhStatus::Panic,
    }
}

fn lib<T>(r: fedhead::Result<T>) -> Result<T, FhStatus> {
    r.map_err(|e| status_of(&e))
}

unsafe fn head_ref<'a>(head: *const FhHead) -> Result<&'a DenseHead, FhStatus> {
    head.as_ref().map(|h| &h.inner).ok_or(FhStatus::NullPointer)
}

unsafe fn input<'a, T>(data: *const T, len: usize) -> Result<&'a [T], FhStatus> {
    if data.is_null() {
        if len == 0 {
            return Ok(&[]);
        }
        return Err(FhStatus::NullPointer);
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn put_head(out: *mut *mut FhHead, head: DenseHead) -> Result<(), FhStatus> {
    if out.is_null() {
        return Err(FhStatus::NullPointer);
    }
    *out = Box::into_raw(Box::new(FhHead { inner: head }));
    Ok(())
}

unsafe fn features(head: &DenseHead, x: *const f32, x_len: usize) -> Result<Vec<f64>, FhStatus> {
    if x_len != head.embedding_dim() {
        return Err(FhStatus::Shape);
    }
    Ok(input(x, x_len)?.iter().map(|&v| v as f64).collect())
}

unsafe fn write_out(values: &[f64], out: *mut f32, out_len: usize) -> Result<(), FhStatus> {
    if out.is_null() {
        return Err(FhStatus::NullPointer);
    }
    if out_len != values.len() {
        return Err(FhStatus::Shape);
    }
    for (i, v) in values.iter().enumerate() {
        *out.add(i) = *v as f32;
    }
    Ok(())
}

unsafe fn write_bytes(bytes: &[u8], buf: *mut u8, cap: usize, written: *mut usize) -> Result<(), FhStatus> {
    if written.is_null() {
        return Err(FhStatus::NullPointer);
    }
    *written = bytes.len();
    if cap < bytes.len() {
        return Err(FhStatus::BufferTooSmall);
    }
    if buf.is_null() {
        return Err(FhStatus::NullPointer);
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    Ok(())
}

/// Number of trainable parameters, `C*E + C`.
#[no_mangle]
pub extern "C" fn fh_param_count(embedding_dim: u32, num_classes: u32) -> usize {
    HeadShape::new(embedding_dim as usize, num_classes as usize).param_count()
}

/// Bytes of float32 parameter storage for a head of this shape.
#[no_mangle]
pub extern "C" fn fh_footprint_bytes(embedding_dim: u32, num_classes: u32) -> usize {
    fedhead::footprint_bytes(embedding_dim as usize, num_classes as usize)
}

/// Size of an encoded model of this shape (16-byte header plus payload).
#[no_mangle]
pub extern "C" fn fh_encoded_len(embedding_dim: u32, num_classes: u32) -> usize {
    wire::encoded_len(HeadShape::new(embedding_dim as usize, num_classes as usize))
}

/// Size of the framed form of an encoded model of this shape.
#[no_mangle]
pub extern "C" fn fh_framed_len(embedding_dim: u32, num_classes: u32) -> usize {
    wire::frame_count(fh_encoded_len(embedding_dim, num_classes)) * wire::FRAME_LEN
}

/// Static NUL-terminated name of a status code.
#[no_mangle]
pub extern "C" fn fh_status_str(status: FhStatus) -> *const c_char {
    let s: &'static [u8] = match status {
        FhStatus::Ok => b"ok\0",
        FhStatus::NullPointer => b"null pointer\0",
        FhStatus::Shape => b"shape mismatch\0",
        FhStatus::Label => b"label out of range\0",
        FhStatus::Usage => b"invalid argument\0",
        FhStatus::Numeric => b"non-finite result\0",
        FhStatus::Truncated => b"truncated model bytes\0",
        FhStatus::BadMagic => b"bad magic\0",
        FhStatus::Corrupt => b"checksum mismatch\0",
        FhStatus::Encoding => b"encoding error\0",
        FhStatus::BufferTooSmall => b"buffer too small\0",
        FhStatus::Panic => b"internal panic\0",
        FhStatus::Internal => b"internal error\0",
    };
    s.as_ptr().cast()
}

/// Creates a zero-initialised head.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fh_head_new_zeros(embedding_dim: u32, num_classes: u32, out: *mut *mut FhHead) -> FhStatus {
    guard(|| {
        let head = lib(DenseHead::zeros(embedding_dim as usize, num_classes as usize))?;
        put_head(out, head)
    })
}

/// Creates a Glorot-uniform head from `seed`.
///
/// # Safety
/// `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fh_head_new_random(
    embedding_dim: u32,
    num_classes: u32,
    seed: u64,
    out: *mut *mut FhHead,
) -> FhStatus {
    guard(|| {
        let mode = InitMode::Random { seed };
        let head = lib(DenseHead::init(embedding_dim as usize, num_classes as usize, &mode))?;
        put_head(out, head)
    })
}

/// Releases a head. Null is ignored.
///
/// # Safety
/// `head` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fh_head_free(head: *mut FhHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// # Safety
/// `head` must be a live handle; `embedding_dim` and `num_classes` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn fh_head_shape(
    head: *const FhHead,
    embedding_dim: *mut u32,
    num_classes: *mut u32,
) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        if embedding_dim.is_null() || num_classes.is_null() {
            return Err(FhStatus::NullPointer);
        }
        *embedding_dim = h.embedding_dim() as u32;
        *num_classes = h.num_classes() as u32;
        Ok(())
    })
}

/// Copies the flat parameters (weight rows by class, then bias) into `out`.
///
/// # Safety
/// `head` must be a live handle; `out` must hold `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn fh_head_params(head: *const FhHead, out: *mut f32, out_len: usize) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        let flat: Vec<f64> = h.flat_params().collect();
        write_out(&flat, out, out_len)
    })
}

/// Writes the `C` class probabilities for one embedding.
///
/// # Safety
/// `head` must be a live handle; `x` must hold `x_len` floats and `probs` `probs_len`.
#[no_mangle]
pub unsafe extern "C" fn fh_head_forward(
    head: *const FhHead,
    x: *const f32,
    x_len: usize,
    probs: *mut f32,
    probs_len: usize,
) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        let x = features(h, x, x_len)?;
        let p = softmax(&lib(h.forward(&x))?);
        write_out(&p, probs, probs_len)
    })
}

/// Writes the predicted class (ties go to the lowest index).
///
/// # Safety
/// `head` must be a live handle; `x` must hold `x_len` floats; `label` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn fh_head_predict(
    head: *const FhHead,
    x: *const f32,
    x_len: usize,
    label: *mut u32,
) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        let x = features(h, x, x_len)?;
        if label.is_null() {
            return Err(FhStatus::NullPointer);
        }
        *label = lib(h.predict(&x))? as u32;
        Ok(())
    })
}

/// Runs `local_episodes` SGD steps on a batch of `n` samples.
///
/// `features` is `n` embeddings back to back (`n * E` floats). On error the
/// head is left as it was before the failing step.
///
/// # Safety
/// `head` must be a live handle not used concurrently; `features` must hold
/// `n * E` floats and `labels` `n` values.
#[no_mangle]
pub unsafe extern "C" fn fh_head_train_batch(
    head: *mut FhHead,
    features: *const f32,
    labels: *const u32,
    n: usize,
    learning_rate: f64,
    local_episodes: u32,
) -> FhStatus {
    guard(|| {
        let h = head.as_mut().map(|h| &mut h.inner).ok_or(FhStatus::NullPointer)?;
        let e = h.embedding_dim();
        let total = n.checked_mul(e).ok_or(FhStatus::Usage)?;
        let xs = input(features, total)?;
        let ys = input(labels, n)?;
        let batch: Vec<EmbeddingSample> = xs
            .chunks_exact(e)
            .zip(ys)
            .map(|(x, &y)| EmbeddingSample::new(x.iter().map(|&v| v as f64).collect(), y as usize))
            .collect();
        let mut trained = h.clone();
        lib(trained.train_batch(&batch, learning_rate, local_episodes as usize))?;
        *h = trained;
        Ok(())
    })
}

/// Encodes the head into `buf`. `written` receives the encoded size, also
/// when the call fails with `FH_STATUS_BUFFER_TOO_SMALL`.
///
/// # Safety
/// `head` must be a live handle; `buf` must hold `cap` bytes; `written` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn fh_head_encode(
    head: *const FhHead,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        let bytes = wire::encode_model(&ModelBlob::from_head(h)).map_err(|e| wire_status(&e))?;
        write_bytes(&bytes, buf, cap, written)
    })
}

/// As [`fh_head_encode`], producing the 8-byte-frame form.
///
/// # Safety
/// Same as [`fh_head_encode`].
#[no_mangle]
pub unsafe extern "C" fn fh_head_encode_framed(
    head: *const FhHead,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> FhStatus {
    guard(|| {
        let h = head_ref(head)?;
        let bytes = wire::encode_model(&ModelBlob::from_head(h))
            .and_then(|b| wire::frame_bytes(&b))
            .map_err(|e| wire_status(&e))?;
        write_bytes(&bytes, buf, cap, written)
    })
}

/// Decodes an encoded model into a new head.
///
/// # Safety
/// `buf` must hold `len` bytes; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fh_head_decode(buf: *const u8, len: usize, out: *mut *mut FhHead) -> FhStatus {
    guard(|| {
        let blob = wire::decode_model(input(buf, len)?).map_err(|e| wire_status(&e))?;
        put_head(out, lib(blob.to_head())?)
    })
}

/// Decodes the 8-byte-frame form into a new head.
///
/// # Safety
/// Same as [`fh_head_decode`].
#[no_mangle]
pub unsafe extern "C" fn fh_head_decode_framed(buf: *const u8, len: usize, out: *mut *mut FhHead) -> FhStatus {
    guard(|| {
        let bytes = wire::unframe_bytes(input(buf, len)?).map_err(|e| wire_status(&e))?;
        let blob = wire::decode_model(&bytes).map_err(|e| wire_status(&e))?;
        put_head(out, lib(blob.to_head())?)
    })
}

/// Element-wise mean of `n` heads of one shape, as a new head.
///
/// # Safety
/// `heads` must hold `n` live handles; `out` must be valid for a pointer write.
#[no_mangle]
pub unsafe extern "C" fn fh_heads_average(heads: *const *const FhHead, n: usize, out: *mut *mut FhHead) -> FhStatus {
    guard(|| {
        let handles = input(heads, n)?;
        let blobs = handles
            .iter()
            .map(|&h| head_ref(h).map(ModelBlob::from_head))
            .collect::<Result<Vec<_>, _>>()?;
        let avg = lib(average_blobs(&blobs))?;
        put_head(out, lib(avg.to_head())?)
    })
}
