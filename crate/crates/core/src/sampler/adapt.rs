//! Warm-up adaptation: dual-averaging step size and windowed diagonal
//! mass-matrix estimation.

/// Nesterov dual averaging on `log(step_size)`.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    mu: f64,
    counter: f64,
    s_bar: f64,
    x_bar: f64,
}

impl DualAveraging {
    pub fn new(target: f64) -> Self {
        Self {
            target,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: 0.0,
            counter: 0.0,
            s_bar: 0.0,
            x_bar: 0.0,
        }
    }

    /// Restarts around `step_size`, shrinking toward `10 * step_size`.
    pub fn restart(&mut self, step_size: f64) {
        self.mu = (10.0 * step_size).ln();
        self.counter = 0.0;
        self.s_bar = 0.0;
        self.x_bar = 0.0;
    }

    /// Feeds one acceptance statistic; returns the next step size.
    pub fn update(&mut self, accept_stat: f64) -> f64 {
        self.counter += 1.0;
        let stat = accept_stat.min(1.0);
        let eta = 1.0 / (self.counter + self.t0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - stat);
        let x = self.mu - self.s_bar * self.counter.sqrt() / self.gamma;
        let w = self.counter.powf(-self.kappa);
        self.x_bar = (1.0 - w) * self.x_bar + w * x;
        x.exp()
    }

    /// Averaged step size used after warm-up.
    pub fn final_step_size(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Running mean and variance (Welford).
#[derive(Debug, Clone)]
pub struct Welford {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    pub fn new(dim: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &v) in self.mean.iter_mut().zip(&mut self.m2).zip(x) {
            let d = v - *m;
            *m += d / n;
            *s += d * (v - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn sample_variance(&self) -> Vec<f64> {
        let d = (self.n.max(2) - 1) as f64;
        self.m2.iter().map(|s| s / d).collect()
    }

    pub fn reset(&mut self) {
        self.n = 0;
        self.mean.iter_mut().for_each(|m| *m = 0.0);
        self.m2.iter_mut().for_each(|m| *m = 0.0);
    }
}

/// Schedule of slow (metric) windows inside warm-up: an initial fast
/// buffer, doubling windows, then a terminal fast buffer.
#[derive(Debug, Clone)]
pub struct WindowSchedule {
    warmup: usize,
    init_buffer: usize,
    term_buffer: usize,
    window_size: usize,
    next_window_end: usize,
    counter: usize,
}

pub const INIT_BUFFER_FRACTION: f64 = 0.15;
pub const TERM_BUFFER_FRACTION: f64 = 0.10;
pub const BASE_WINDOW: usize = 25;

impl WindowSchedule {
    pub fn new(warmup: usize) -> Self {
        let init_buffer = (INIT_BUFFER_FRACTION * warmup as f64) as usize;
        let term_buffer = (TERM_BUFFER_FRACTION * warmup as f64) as usize;
        let last = (warmup - term_buffer).saturating_sub(1);
        let mut s = Self {
            warmup,
            init_buffer,
            term_buffer,
            window_size: BASE_WINDOW,
            next_window_end: init_buffer + BASE_WINDOW - 1,
            counter: 0,
        };
        if s.next_window_end + 2 * BASE_WINDOW > last {
            s.next_window_end = last;
        }
        s
    }

    fn last_slow(&self) -> usize {
        (self.warmup - self.term_buffer).saturating_sub(1)
    }

    /// Whether the current iteration contributes to the metric estimate.
    pub fn in_slow_window(&self) -> bool {
        self.counter >= self.init_buffer && self.counter < self.warmup - self.term_buffer
    }

    fn end_of_window(&self) -> bool {
        self.counter == self.next_window_end && self.counter != self.warmup
    }

    fn compute_next_window(&mut self) {
        if self.next_window_end == self.last_slow() {
            return;
        }
        self.window_size *= 2;
        self.next_window_end = self.counter + self.window_size;
        if self.next_window_end != self.last_slow()
            && self.next_window_end + 2 * self.window_size >= self.warmup - self.term_buffer
        {
            self.next_window_end = self.last_slow();
        }
    }

    /// Advances one iteration; true when a slow window just closed.
    pub fn step(&mut self) -> bool {
        let closed = self.end_of_window();
        if closed {
            self.compute_next_window();
        }
        self.counter += 1;
        closed
    }
}

/// Shrinks a window variance estimate toward a small constant.
pub fn regularize_variance(var: &[f64], n: usize) -> Vec<f64> {
    let n = n as f64;
    var.iter()
        .map(|v| (n / (n + 5.0)) * v + 1e-3 * (5.0 / (n + 5.0)))
        .collect()
}
