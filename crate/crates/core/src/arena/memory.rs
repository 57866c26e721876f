//! Sparse byte storage backing the simulated arena.

use std::collections::HashMap;

use crate::frame_math::VirtualAddress;

const PAGE_BITS: u32 = 10;
const PAGE_SIZE: usize = 1 << PAGE_BITS;
const PAGE_MASK: u64 = (PAGE_SIZE as u64) - 1;

/// Byte-addressed memory where untouched pages read as zero.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    pages: HashMap<u64, Box<[u8; PAGE_SIZE]>>,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of materialized pages.
    pub fn resident_pages(&self) -> usize {
        self.pages.len()
    }

    /// Splits `[addr, addr + len)` into per-page `(page, offset, len)` pieces.
    fn chunks(addr: VirtualAddress, len: usize) -> impl Iterator<Item = (u64, usize, usize)> {
        let mut cur = addr.value();
        let end = cur + len as u64;
        std::iter::from_fn(move || {
            if cur >= end {
                return None;
            }
            let page = cur >> PAGE_BITS;
            let off = (cur & PAGE_MASK) as usize;
            let n = (PAGE_SIZE - off).min((end - cur) as usize);
            cur += n as u64;
            Some((page, off, n))
        })
    }

    pub fn read(&self, addr: VirtualAddress, buf: &mut [u8]) {
        let mut done = 0;
        for (page, off, n) in Self::chunks(addr, buf.len()) {
            let dst = &mut buf[done..done + n];
            match self.pages.get(&page) {
                Some(p) => dst.copy_from_slice(&p[off..off + n]),
                None => dst.fill(0),
            }
            done += n;
        }
    }

    pub fn write(&mut self, addr: VirtualAddress, bytes: &[u8]) {
        let mut done = 0;
        for (page, off, n) in Self::chunks(addr, bytes.len()) {
            let src = &bytes[done..done + n];
            done += n;
            if !self.pages.contains_key(&page) && src.iter().all(|&b| b == 0) {
                continue;
            }
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0; PAGE_SIZE]));
            p[off..off + n].copy_from_slice(src);
        }
    }

    pub fn fill(&mut self, addr: VirtualAddress, len: u64, byte: u8) {
        let chunk = [byte; PAGE_SIZE];
        let mut cur = addr;
        let mut left = len;
        while left > 0 {
            let n = left.min(PAGE_SIZE as u64);
            self.write(cur, &chunk[..n as usize]);
            cur = VirtualAddress::new(cur.value() + n);
            left -= n;
        }
    }

    /// `memmove` semantics: overlapping ranges copy as if through a buffer.
    pub fn copy(&mut self, src: VirtualAddress, dst: VirtualAddress, len: u64) {
        let mut buf = vec![0u8; len as usize];
        self.read(src, &mut buf);
        self.write(dst, &buf);
    }
}
