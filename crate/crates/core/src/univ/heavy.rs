use rustc_hash::FxHashMap;

/// Bounded set of heavy-hitter candidates keyed by token, evicting the
/// smallest estimate when full.
#[derive(Debug, Clone, Default)]
pub struct HeavyHitters {
    capacity: usize,
    /// binary min-heap on estimate
    heap: Vec<(f64, u64)>,
    pos: FxHashMap<u64, usize>,
    /// Set once any candidate has been turned away or evicted.
    overflowed: bool,
}

impl HeavyHitters {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            heap: Vec::new(),
            pos: FxHashMap::default(),
            overflowed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Whether every item ever offered is still tracked.
    pub fn is_complete(&self) -> bool {
        !self.overflowed
    }

    pub(crate) fn set_overflowed(&mut self, v: bool) {
        self.overflowed = v;
    }

    pub fn contains(&self, token: u64) -> bool {
        self.pos.contains_key(&token)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.heap.iter().map(|&(e, t)| (t, e))
    }

    pub fn clear(&mut self) {
        self.heap.clear();
        self.pos.clear();
        self.overflowed = false;
    }

    /// Insert or refresh `token` with estimate `est`.
    pub fn offer(&mut self, token: u64, est: f64) {
        if let Some(&i) = self.pos.get(&token) {
            let old = self.heap[i].0;
            self.heap[i].0 = est;
            if est < old {
                self.sift_up(i);
            } else {
                self.sift_down(i);
            }
            return;
        }
        if self.heap.len() < self.capacity {
            self.heap.push((est, token));
            let i = self.heap.len() - 1;
            self.pos.insert(token, i);
            self.sift_up(i);
        } else {
            self.overflowed = true;
            if self.capacity == 0 || est <= self.heap[0].0 {
                return;
            }
            let (_, evicted) = self.heap[0];
            self.pos.remove(&evicted);
            self.heap[0] = (est, token);
            self.pos.insert(token, 0);
            self.sift_down(0);
        }
    }

    fn swap(&mut self, a: usize, b: usize) {
        self.heap.swap(a, b);
        self.pos.insert(self.heap[a].1, a);
        self.pos.insert(self.heap[b].1, b);
    }

    fn sift_up(&mut self, mut i: usize) {
        while i > 0 {
            let p = (i - 1) / 2;
            if self.heap[i].0 < self.heap[p].0 {
                self.swap(i, p);
                i = p;
            } else {
                break;
            }
        }
    }

    fn sift_down(&mut self, mut i: usize) {
        let n = self.heap.len();
        loop {
            let l = 2 * i + 1;
            let r = l + 1;
            let mut m = i;
            if l < n && self.heap[l].0 < self.heap[m].0 {
                m = l;
            }
            if r < n && self.heap[r].0 < self.heap[m].0 {
                m = r;
            }
            if m == i {
                break;
            }
            self.swap(i, m);
            i = m;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_largest() {
        let mut h = HeavyHitters::new(3);
        assert!(h.is_complete());
        for (t, e) in [(1, 5.0), (2, 1.0), (3, 7.0), (4, 3.0), (5, 0.5)] {
            h.offer(t, e);
        }
        let mut got: Vec<u64> = h.iter().map(|(t, _)| t).collect();
        got.sort();
        assert_eq!(got, vec![1, 3, 4]);
        h.offer(2, 10.0);
        assert!(h.contains(2));
        assert!(!h.contains(4));
        assert!(!h.is_complete());
        h.offer(3, 0.1);
        h.offer(9, 1.0);
        assert!(!h.contains(3));
        assert_eq!(h.len(), 3);
    }
}
