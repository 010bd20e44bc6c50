//! Leaf pages and access streams shared by the inner-node experiments.
//!
//! An inner node of `n` slots indexes leaf pages in a pool. The traditional
//! node is an array of leaf pointers; the shortcut node maps each slot's page
//! onto its leaf. An access reads one `u64` from the leaf behind a random
//! slot.

use rand::Rng;

use crate::page_pool::{Backend, PagePool, PoolConfig, PAGE_SIZE};
use crate::rewiring::ShortcutNode;

const WORDS: usize = PAGE_SIZE / 8;

const LEAF_MUL: u64 = 0xD6E8_FEB8_6659_FD93;

const fn inverse(a: u64) -> u64 {
    // Newton iteration; each step doubles the number of correct low bits.
    let mut x = a;
    let mut i = 0;
    while i < 6 {
        x = x.wrapping_mul(2u64.wrapping_sub(a.wrapping_mul(x)));
        i += 1;
    }
    x
}

const LEAF_MUL_INV: u64 = inverse(LEAF_MUL);

/// Content of word `word` of leaf `leaf`.
#[inline(always)]
pub(crate) fn leaf_word(leaf: usize, word: usize) -> u64 {
    (((leaf as u64) << 9) | word as u64).wrapping_mul(LEAF_MUL)
}

/// Inverse of [`leaf_word`]: `(leaf, word)`.
#[inline(always)]
pub(crate) fn decode_leaf_word(v: u64) -> (usize, usize) {
    let x = v.wrapping_mul(LEAF_MUL_INV);
    ((x >> 9) as usize, (x & (WORDS as u64 - 1)) as usize)
}

pub(crate) struct Leaves {
    pub pool: PagePool,
    pub offsets: Vec<u64>,
}

impl Leaves {
    pub fn new(count: usize) -> Result<Self, crate::page_pool::PoolError> {
        let mut pool = PagePool::with_config(
            PoolConfig::new(Backend::Real, count)
                .shrink_threshold(usize::MAX)
                .max_pages(count.max(1)),
        )?;
        let mut offsets = Vec::with_capacity(count);
        for leaf in 0..count {
            let off = pool.acquire_page()?;
            let page = pool.view_address(off).cast::<u64>();
            for w in 0..WORDS {
                // SAFETY: `page` is a live pool page of WORDS words.
                unsafe { page.add(w).write(leaf_word(leaf, w)) };
            }
            offsets.push(off);
        }
        Ok(Leaves { pool, offsets })
    }

    pub fn ptr(&self, leaf: usize) -> *const u8 {
        self.pool.view_address(self.offsets[leaf])
    }
}

/// Accesses encoded as `slot * PAGE_SIZE + byte`, with `byte` a word offset.
pub(crate) fn random_accesses(rng: &mut impl Rng, slots: usize, count: usize) -> Vec<u64> {
    (0..count)
        .map(|_| {
            let slot = rng.random_range(0..slots as u64);
            let word = rng.random_range(0..WORDS as u64);
            slot * PAGE_SIZE as u64 + word * 8
        })
        .collect()
}

/// Sum of all accessed words, from the leaf assignment alone.
pub(crate) fn expected_sum(accesses: &[u64], leaf_of_slot: impl Fn(usize) -> usize) -> u64 {
    accesses.iter().fold(0u64, |acc, &a| {
        let slot = (a / PAGE_SIZE as u64) as usize;
        let word = (a % PAGE_SIZE as u64) as usize / 8;
        acc.wrapping_add(leaf_word(leaf_of_slot(slot), word))
    })
}

/// Pointer-array inner node.
pub(crate) struct TraditionalNode {
    pub slots: Vec<*const u8>,
}

impl TraditionalNode {
    pub fn allocate(n: usize) -> Self {
        TraditionalNode {
            slots: vec![std::ptr::null(); n],
        }
    }

    #[inline(never)]
    pub fn access(&self, accesses: &[u64]) -> u64 {
        let mut sum = 0u64;
        for &a in accesses {
            let slot = (a >> 12) as usize;
            let byte = (a & (PAGE_SIZE as u64 - 1)) as usize;
            // SAFETY: accesses were drawn for this node's slot count and every
            // slot points at a live leaf.
            unsafe {
                let leaf = *self.slots.get_unchecked(slot);
                sum = sum.wrapping_add(leaf.add(byte).cast::<u64>().read());
            }
        }
        std::hint::black_box(sum)
    }
}

/// Reads through a mapped, populated or lazily faulting shortcut.
#[inline(never)]
pub(crate) fn shortcut_access(node: &ShortcutNode, accesses: &[u64]) -> u64 {
    let base = node.base().cast_const();
    assert!(!base.is_null());
    let mut sum = 0u64;
    for &a in accesses {
        debug_assert!((a as usize) < node.len_bytes());
        // SAFETY: a < slot_count * PAGE_SIZE and every slot is mapped.
        unsafe { sum = sum.wrapping_add(base.add(a as usize).cast::<u64>().read()) };
    }
    std::hint::black_box(sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn leaf_words_decode() {
        for (l, w) in [(0, 0), (1, 511), (123_456, 77), (1 << 30, 3)] {
            assert_eq!(decode_leaf_word(leaf_word(l, w)), (l, w));
        }
    }

    #[test]
    fn traditional_and_shortcut_agree_with_oracle() {
        if !Backend::real_available() {
            return;
        }
        let leaves = Leaves::new(64).unwrap();
        let fanin = 4;
        let n = 64 * fanin;
        let mut trad = TraditionalNode::allocate(n);
        let node = ShortcutNode::reserve(&leaves.pool, n).unwrap();
        for slot in 0..n {
            trad.slots[slot] = leaves.ptr(slot / fanin);
            node.set_indirection(slot, leaves.offsets[slot / fanin]).unwrap();
        }
        let acc = random_accesses(&mut rand_chacha::ChaCha8Rng::seed_from_u64(1), n, 10_000);
        let want = expected_sum(&acc, |s| s / fanin);
        assert_eq!(trad.access(&acc), want);
        assert_eq!(shortcut_access(&node, &acc), want);
    }
}
