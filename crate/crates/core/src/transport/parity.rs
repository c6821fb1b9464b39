//! Single XOR parity over a coding group.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParityError {
    #[error("cannot build parity over an empty group")]
    EmptyGroup,
    #[error("{missing} data segments missing; single parity recovers at most one")]
    TooManyMissing { missing: usize },
    #[error("missing index {index} outside group of {k}")]
    IndexOutOfRange { index: usize, k: usize },
}

fn xor_into(acc: &mut Vec<u8>, bytes: &[u8]) {
    if acc.len() < bytes.len() {
        acc.resize(bytes.len(), 0);
    }
    for (a, b) in acc.iter_mut().zip(bytes) {
        *a ^= b;
    }
}

/// Byte-wise XOR of the payloads, each zero-padded to the longest.
pub fn build_parity<P: AsRef<[u8]>>(group_payloads: &[P]) -> Result<Vec<u8>, ParityError> {
    if group_payloads.is_empty() {
        return Err(ParityError::EmptyGroup);
    }
    let mut acc = Vec::new();
    for p in group_payloads {
        xor_into(&mut acc, p.as_ref());
    }
    Ok(acc)
}

/// Rebuilds the data payload at `missing_index` from the parity and the
/// other `k - 1` payloads.
///
/// `present[i]` is `None` for absent slots. The result has the parity's
/// length; trimming to the original length is the caller's business.
pub fn recover_from_parity<P: AsRef<[u8]>>(
    present: &[Option<P>],
    parity: &[u8],
    missing_index: usize,
) -> Result<Vec<u8>, ParityError> {
    let k = present.len();
    if missing_index >= k {
        return Err(ParityError::IndexOutOfRange {
            index: missing_index,
            k,
        });
    }
    // the slot at missing_index is ignored even if filled
    let others_missing = present
        .iter()
        .enumerate()
        .filter(|(i, p)| *i != missing_index && p.is_none())
        .count();
    if others_missing > 0 {
        return Err(ParityError::TooManyMissing {
            missing: others_missing + 1,
        });
    }
    let mut acc = parity.to_vec();
    for (_, p) in present.iter().enumerate().filter(|(i, _)| *i != missing_index) {
        xor_into(&mut acc, p.as_ref().expect("checked above").as_ref());
    }
    acc.truncate(parity.len());
    Ok(acc)
}
