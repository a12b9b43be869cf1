//! Block partitioning over scoped worker threads.

use std::ops::Range;

/// Splits `0..len` into at most `workers` contiguous, near-equal blocks.
pub fn blocks(len: usize, workers: usize) -> Vec<Range<usize>> {
    let workers = workers.max(1).min(len.max(1));
    let base = len / workers;
    let extra = len % workers;
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 0..workers {
        let size = base + usize::from(w < extra);
        out.push(start..start + size);
        start += size;
    }
    out
}

/// Runs `f` once per block of `0..len`; single-worker runs stay on the caller's thread.
pub fn for_each_block<F>(len: usize, workers: usize, f: F)
where
    F: Fn(Range<usize>) + Sync,
{
    let parts = blocks(len, workers);
    if parts.len() <= 1 {
        f(0..len);
        return;
    }
    std::thread::scope(|s| {
        for r in parts {
            let f = &f;
            s.spawn(move || f(r));
        }
    });
}

/// Hands each worker a disjoint run of `width`-sized rows of `data`.
///
/// `f` receives the first row index of its block and the mutable rows.
pub fn for_each_row_block<T, F>(data: &mut [T], width: usize, workers: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let rows = if width == 0 { 0 } else { data.len() / width };
    let parts = blocks(rows, workers);
    if parts.len() <= 1 {
        f(0, data);
        return;
    }
    std::thread::scope(|s| {
        let mut rest = data;
        for r in parts {
            let (head, tail) = rest.split_at_mut(r.len() * width);
            rest = tail;
            let f = &f;
            s.spawn(move || f(r.start, head));
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blocks_cover_range() {
        for len in [0, 1, 5, 17] {
            for w in [1, 2, 3, 8, 40] {
                let b = blocks(len, w);
                assert_eq!(b.first().unwrap().start, 0);
                assert_eq!(b.last().unwrap().end, len);
                assert!(b.windows(2).all(|p| p[0].end == p[1].start));
            }
        }
    }

    #[test]
    fn row_blocks_are_disjoint() {
        let mut data = vec![0usize; 10 * 3];
        for_each_row_block(&mut data, 3, 4, |first, rows| {
            for (i, row) in rows.chunks_mut(3).enumerate() {
                row.iter_mut().for_each(|v| *v += first + i);
            }
        });
        for (r, row) in data.chunks(3).enumerate() {
            assert!(row.iter().all(|&v| v == r));
        }
    }
}
