//! Dense NCHW tensor of 64-bit floats.

/// Dense numeric tensor. Data is laid out batch-major: `((n*C + c)*H + y)*W + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct Value {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Value {
    pub fn zeros(shape: [usize; 4]) -> Self {
        let len = shape.iter().product();
        Value { shape, data: vec![0.0; len] }
    }

    pub fn from_data(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape/data mismatch");
        Value { shape, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + y) * self.shape[3] + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Channel slice `[lo, hi)` as a new tensor.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Value {
        let [n, _, h, w] = self.shape;
        let mut out = Value::zeros([n, hi - lo, h, w]);
        for b in 0..n {
            for c in lo..hi {
                for y in 0..h {
                    for x in 0..w {
                        out.set(b, c - lo, y, x, self.get(b, c, y, x));
                    }
                }
            }
        }
        out
    }

    /// Accumulate `delta` into channels `[lo, lo + delta_channels)`.
    pub fn add_into_channels(&mut self, lo: usize, delta: &Value) {
        let [n, dc, h, w] = delta.shape;
        for b in 0..n {
            for c in 0..dc {
                for y in 0..h {
                    for x in 0..w {
                        let i = self.idx(b, lo + c, y, x);
                        self.data[i] += delta.get(b, c, y, x);
                    }
                }
            }
        }
    }

    /// Batch rows `[lo, hi)` as a new tensor.
    pub fn slice_batch(&self, lo: usize, hi: usize) -> Value {
        let [_, c, h, w] = self.shape;
        let row = c * h * w;
        Value::from_data([hi - lo, c, h, w], self.data[lo * row..hi * row].to_vec())
    }
}
