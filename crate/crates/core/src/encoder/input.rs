use super::vocab::{CLS_ID, SEP_ID};
use crate::error::{contract, Result};

/// A packed token sequence: `[CLS] s1 [SEP]` or `[CLS] s1 [SEP] s2 [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedInput {
    pub ids: Vec<u32>,
    /// 0 up to and including the first `[SEP]`, 1 afterwards.
    pub segment_ids: Vec<u8>,
}

impl TokenizedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Packs one or two sentences, truncating the longer side first until the
/// packed length fits in `max_len`.
pub fn pack_input(s1: &[u32], s2: Option<&[u32]>, max_len: usize) -> Result<TokenizedInput> {
    if s1.is_empty() {
        return Err(contract("first sentence must be non-empty"));
    }
    match s2 {
        None => {
            if max_len < 3 {
                return Err(contract(format!("max_len {max_len} cannot hold a single sentence")));
            }
            let a = &s1[..s1.len().min(max_len - 2)];
            let mut ids = Vec::with_capacity(a.len() + 2);
            ids.push(CLS_ID);
            ids.extend_from_slice(a);
            ids.push(SEP_ID);
            let segment_ids = vec![0; ids.len()];
            Ok(TokenizedInput { ids, segment_ids })
        }
        Some(s2) => {
            if max_len < 4 {
                return Err(contract(format!("max_len {max_len} cannot hold a sentence pair")));
            }
            let budget = max_len - 3;
            let (mut la, mut lb) = (s1.len(), s2.len());
            while la + lb > budget {
                if la > lb {
                    la -= 1;
                } else {
                    lb -= 1;
                }
            }
            let mut ids = Vec::with_capacity(la + lb + 3);
            ids.push(CLS_ID);
            ids.extend_from_slice(&s1[..la]);
            ids.push(SEP_ID);
            let first = ids.len();
            ids.extend_from_slice(&s2[..lb]);
            ids.push(SEP_ID);
            let mut segment_ids = vec![0; first];
            segment_ids.resize(ids.len(), 1);
            Ok(TokenizedInput { ids, segment_ids })
        }
    }
}
