// im2col / col2im lowering for the convolution ops.

/// Geometry of a 1D convolution over `batch` independent signals.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv1dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv1dGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel
    }

    pub fn cols_per_batch(&self) -> usize {
        self.col_rows() * self.t_out
    }
}

pub(crate) fn output_len(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

pub(crate) fn im2col_1d(x: &[f64], g: &Conv1dGeom) -> Vec<f64> {
    let mut cols = vec![0.0; g.batch * g.cols_per_batch()];
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * g.t_in..(b + 1) * g.c_in * g.t_in];
        let cb = &mut cols[b * g.cols_per_batch()..(b + 1) * g.cols_per_batch()];
        for ci in 0..g.c_in {
            let xrow = &xb[ci * g.t_in..(ci + 1) * g.t_in];
            for kk in 0..g.kernel {
                let row = &mut cb[(ci * g.kernel + kk) * g.t_out..(ci * g.kernel + kk + 1) * g.t_out];
                for (t, slot) in row.iter_mut().enumerate() {
                    let pos = (t * g.stride + kk) as isize - g.padding as isize;
                    if pos >= 0 && (pos as usize) < g.t_in {
                        *slot = xrow[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_1d(dcols: &[f64], g: &Conv1dGeom, b: usize, dx: &mut [f64]) {
    let dxb = &mut dx[b * g.c_in * g.t_in..(b + 1) * g.c_in * g.t_in];
    for ci in 0..g.c_in {
        for kk in 0..g.kernel {
            let row = &dcols[(ci * g.kernel + kk) * g.t_out..(ci * g.kernel + kk + 1) * g.t_out];
            for (t, v) in row.iter().enumerate() {
                let pos = (t * g.stride + kk) as isize - g.padding as isize;
                if pos >= 0 && (pos as usize) < g.t_in {
                    dxb[ci * g.t_in + pos as usize] += v;
                }
            }
        }
    }
}

/// Geometry of a square-kernel 2D convolution over one `C × H × W` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }
}

pub(crate) fn im2col_2d(x: &[f64], g: &Conv2dGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.col_rows() * positions];
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (ci * g.kernel + ky) * g.kernel + kx;
                let row = &mut cols[r * positions..(r + 1) * positions];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h_in {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w_in..(iy as usize + 1) * g.w_in];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w_in {
                            row[oy * g.w_out + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_2d(dcols: &[f64], g: &Conv2dGeom, dx: &mut [f64]) {
    let positions = g.positions();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h_in * g.w_in..(ci + 1) * g.h_in * g.w_in];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let r = (ci * g.kernel + ky) * g.kernel + kx;
                let row = &dcols[r * positions..(r + 1) * positions];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.h_in {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w_in {
                            plane[iy as usize * g.w_in + ix as usize] += row[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}
