//! Dense linear assignment by shortest augmenting paths (Jonker-Volgenant):
//! column reduction, reduction transfer, two rounds of augmenting row
//! reduction, then Dijkstra-style augmentation for the remaining free rows.

/// Optimal assignment of a square cost matrix given row-major.
#[derive(Debug, Clone)]
pub struct Assignment {
    /// `row_to_col[i]` is the column matched to row `i`.
    pub row_to_col: Vec<usize>,
    pub cost: f64,
    /// Row scans performed by reduction and augmentation.
    pub iterations: u64,
}

const NONE: usize = usize::MAX;
/// Row scans allowed per reduction pass, per row.
const ROW_REDUCTION_BUDGET: usize = 8;

pub fn solve(n: usize, cost: &[f64]) -> Assignment {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Assignment {
            row_to_col: Vec::new(),
            cost: 0.0,
            iterations: 0,
        };
    }
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut x = vec![NONE; n];
    let mut y = vec![NONE; n];
    let mut v = vec![0.0; n];
    let mut iterations = 0u64;

    // Column reduction.
    let mut matches = vec![0usize; n];
    for j in (0..n).rev() {
        let mut imin = 0;
        let mut min = c(0, j);
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            x[imin] = j;
            y[j] = imin;
        } else if v[j] < v[x[imin]] {
            let j1 = x[imin];
            x[imin] = j;
            y[j] = imin;
            y[j1] = NONE;
        } else {
            y[j] = NONE;
        }
    }

    // Reduction transfer.
    let mut free = Vec::with_capacity(n);
    for i in 0..n {
        if matches[i] == 0 {
            free.push(i);
        } else if matches[i] == 1 {
            let j1 = x[i];
            let mut min = f64::INFINITY;
            for j in 0..n {
                if j != j1 {
                    min = min.min(c(i, j) - v[j]);
                }
            }
            if min.is_finite() {
                v[j1] -= min;
            }
        }
    }

    // Augmenting row reduction.
    for _ in 0..2 {
        let previous = std::mem::take(&mut free);
        let mut queue = previous;
        let mut k = 0;
        let mut budget = ROW_REDUCTION_BUDGET * n;
        while k < queue.len() {
            if budget == 0 {
                // Float prices can make the reduction creep by tiny amounts;
                // leave the remaining rows to the augmentation phase.
                free.extend_from_slice(&queue[k..]);
                break;
            }
            budget -= 1;
            let i = queue[k];
            k += 1;
            iterations += 1;
            let mut umin = c(i, 0) - v[0];
            let mut j1 = 0;
            let mut usubmin = f64::INFINITY;
            let mut j2 = NONE;
            for j in 1..n {
                let h = c(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = y[j1];
            let strict = umin < usubmin;
            if strict {
                v[j1] -= usubmin - umin;
            } else if i0 != NONE && j2 != NONE {
                j1 = j2;
                i0 = y[j2];
            }
            if x[i] != NONE && y[x[i]] == i {
                y[x[i]] = NONE;
            }
            x[i] = j1;
            y[j1] = i;
            if i0 != NONE && i0 != i {
                x[i0] = NONE;
                if strict {
                    // Reconsider the displaced row right away.
                    k -= 1;
                    queue[k] = i0;
                } else {
                    free.push(i0);
                }
            }
        }
    }

    // Augmentation.
    let mut d = vec![0.0; n];
    let mut pred = vec![0usize; n];
    let mut cols: Vec<usize> = (0..n).collect();
    for &free_row in &free {
        for j in 0..n {
            d[j] = c(free_row, j) - v[j];
            pred[j] = free_row;
            cols[j] = j;
        }
        let mut low = 0;
        let mut up = 0;
        let mut ready = 0;
        let mut min = 0.0;
        let end = 'search: loop {
            if up == low {
                ready = low;
                min = d[cols[up]];
                up += 1;
                for k in up..n {
                    let j = cols[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        cols[k] = cols[up];
                        cols[up] = j;
                        up += 1;
                    }
                }
                for &j in &cols[low..up] {
                    if y[j] == NONE {
                        break 'search j;
                    }
                }
            }
            let j1 = cols[low];
            low += 1;
            let i = y[j1];
            iterations += 1;
            let u1 = c(i, j1) - v[j1] - min;
            let mut k = up;
            while k < n {
                let j = cols[k];
                let reduced = c(i, j) - v[j] - u1;
                if reduced < d[j] {
                    pred[j] = i;
                    d[j] = reduced;
                    if reduced == min {
                        if y[j] == NONE {
                            break 'search j;
                        }
                        cols[k] = cols[up];
                        cols[up] = j;
                        up += 1;
                    }
                }
                k += 1;
            }
        };
        for &j in &cols[..ready] {
            v[j] += d[j] - min;
        }
        let mut j = end;
        loop {
            let i = pred[j];
            y[j] = i;
            let next = x[i];
            x[i] = j;
            if i == free_row {
                break;
            }
            j = next;
        }
    }

    let cost = x.iter().enumerate().map(|(i, &j)| c(i, j)).sum();
    Assignment {
        row_to_col: x,
        cost,
        iterations,
    }
}
