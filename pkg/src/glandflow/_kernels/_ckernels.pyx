# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels; semantics match ``_pykernels``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def label_components(bits, int connectivity=4):
    if connectivity != 4 and connectivity != 8:
        raise ValueError("connectivity must be 4 or 8")
    cdef cnp.uint8_t[:, ::1] grid = np.ascontiguousarray(bits, dtype=np.uint8)
    cdef Py_ssize_t h = grid.shape[0], w = grid.shape[1]
    out = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int32_t[:, ::1] labels = out
    cdef cnp.int64_t[::1] queue = np.empty(max(h * w, 1), dtype=np.int64)
    cdef int dys[8]
    cdef int dxs[8]
    dys[:] = [-1, 0, 0, 1, -1, -1, 1, 1]
    dxs[:] = [0, -1, 1, 0, -1, 1, -1, 1]
    cdef int n_off = connectivity
    cdef Py_ssize_t r, c, y, x, yy, xx, head, tail
    cdef int k
    cdef cnp.int32_t next_id = 0
    cdef cnp.int64_t p
    with nogil:
        for r in range(h):
            for c in range(w):
                if grid[r, c] == 0 or labels[r, c] != 0:
                    continue
                next_id += 1
                labels[r, c] = next_id
                head = 0
                tail = 0
                queue[tail] = r * w + c
                tail += 1
                while head < tail:
                    p = queue[head]
                    head += 1
                    y = p // w
                    x = p - y * w
                    for k in range(n_off):
                        yy = y + dys[k]
                        xx = x + dxs[k]
                        if 0 <= yy < h and 0 <= xx < w and grid[yy, xx] != 0 and labels[yy, xx] == 0:
                            labels[yy, xx] = next_id
                            queue[tail] = yy * w + xx
                            tail += 1
    return out


def grow_regions(labels_in, epi_in):
    out = np.array(labels_in, dtype=np.int32, copy=True, order="C")
    cdef cnp.int32_t[:, ::1] labels = out
    cdef cnp.uint8_t[:, ::1] epi = np.ascontiguousarray(epi_in, dtype=np.uint8)
    cdef Py_ssize_t h = labels.shape[0], w = labels.shape[1]
    cdef cnp.int32_t[:, ::1] pending = np.zeros((h, w), dtype=np.int32)
    cdef cnp.int64_t[::1] frontier = np.empty(max(h * w, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] nxt = np.empty(max(h * w, 1), dtype=np.int64)
    cdef cnp.int64_t[::1] tmp
    cdef int dys[4]
    cdef int dxs[4]
    dys[:] = [-1, 0, 0, 1]
    dxs[:] = [0, -1, 1, 0]
    cdef Py_ssize_t i, n_front = 0, n_next, r, c, y, x, yy, xx
    cdef int k
    cdef cnp.int64_t p
    cdef cnp.int32_t lab
    with nogil:
        for r in range(h):
            for c in range(w):
                if labels[r, c] > 0:
                    frontier[n_front] = r * w + c
                    n_front += 1
        while n_front > 0:
            n_next = 0
            for i in range(n_front):
                p = frontier[i]
                y = p // w
                x = p - y * w
                lab = labels[y, x]
                for k in range(4):
                    yy = y + dys[k]
                    xx = x + dxs[k]
                    if 0 <= yy < h and 0 <= xx < w and epi[yy, xx] != 0 and labels[yy, xx] == 0:
                        if pending[yy, xx] == 0:
                            pending[yy, xx] = lab
                            nxt[n_next] = yy * w + xx
                            n_next += 1
                        elif lab < pending[yy, xx]:
                            pending[yy, xx] = lab
            for i in range(n_next):
                p = nxt[i]
                y = p // w
                x = p - y * w
                labels[y, x] = pending[y, x]
            tmp = frontier
            frontier = nxt
            nxt = tmp
            n_front = n_next
    return out


cdef Py_ssize_t _ROW_BLOCK_ELEMS = 1 << 19  # column buffer cap, in doubles


cdef void _im2col(double[:, :, :, ::1] x, Py_ssize_t i, Py_ssize_t r0, Py_ssize_t r1,
                  double[:, ::1] cols) noexcept nogil:
    cdef Py_ssize_t h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t r, c, dy, dx, ch, yy, xx, row, col
    row = 0
    for r in range(r0, r1):
        for c in range(wd):
            col = 0
            for dy in range(3):
                yy = r + dy - 1
                for dx in range(3):
                    xx = c + dx - 1
                    if yy < 0 or yy >= h or xx < 0 or xx >= wd:
                        for ch in range(cin):
                            cols[row, col + ch] = 0.0
                    else:
                        for ch in range(cin):
                            cols[row, col + ch] = x[i, yy, xx, ch]
                    col += cin
            row += 1


cdef void _col2im_add(double[:, ::1] cols, Py_ssize_t i, Py_ssize_t r0, Py_ssize_t r1,
                      double[:, :, :, ::1] dx_out) noexcept nogil:
    cdef Py_ssize_t h = dx_out.shape[1], wd = dx_out.shape[2], cin = dx_out.shape[3]
    cdef Py_ssize_t r, c, dy, ddx, ch, yy, xx, row, col
    row = 0
    for r in range(r0, r1):
        for c in range(wd):
            col = 0
            for dy in range(3):
                yy = r + dy - 1
                for ddx in range(3):
                    xx = c + ddx - 1
                    if 0 <= yy < h and 0 <= xx < wd:
                        for ch in range(cin):
                            dx_out[i, yy, xx, ch] += cols[row, col + ch]
                    col += cin
            row += 1


cdef Py_ssize_t _rows_per_block(Py_ssize_t wd, Py_ssize_t cin):
    cdef Py_ssize_t rows = _ROW_BLOCK_ELEMS // max(1, wd * 9 * cin)
    return max(1, rows)


def conv3x3_forward(x_in, w_in, b_in):
    """Same-padded 3x3 convolution via blocked im2col and one BLAS product per block."""
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    wmat = np.ascontiguousarray(w_in, dtype=np.float64).reshape(9 * cin, -1)
    b = np.asarray(b_in, dtype=np.float64)
    cout = wmat.shape[1]
    out_arr = np.empty((n, h, wd, cout), dtype=np.float64)
    cdef Py_ssize_t step = _rows_per_block(wd, cin)
    buf = np.empty((min(step, h) * wd, 9 * cin), dtype=np.float64)
    cdef double[:, ::1] cols
    cdef Py_ssize_t i, r0, r1
    for i in range(n):
        for r0 in range(0, h, step):
            r1 = min(h, r0 + step)
            block = buf[:(r1 - r0) * wd]
            cols = block
            with nogil:
                _im2col(x, i, r0, r1, cols)
            res = out_arr[i, r0:r1].reshape(-1, cout)
            np.matmul(block, wmat, out=res)
            res += b
    return out_arr


def conv3x3_backward(x_in, w_in, g_in):
    """Gradients of ``conv3x3_forward`` wrt x, w and b."""
    x_arr = np.ascontiguousarray(x_in, dtype=np.float64)
    cdef double[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    w_arr = np.ascontiguousarray(w_in, dtype=np.float64)
    wmat = w_arr.reshape(9 * cin, -1)
    g_arr = np.ascontiguousarray(g_in, dtype=np.float64)
    cout = wmat.shape[1]
    dx_arr = np.zeros((n, h, wd, cin), dtype=np.float64)
    cdef double[:, :, :, ::1] dxv = dx_arr
    dwmat = np.zeros((9 * cin, cout), dtype=np.float64)
    cdef Py_ssize_t step = _rows_per_block(wd, cin)
    rows = min(step, h) * wd
    buf = np.empty((rows, 9 * cin), dtype=np.float64)
    dbuf = np.empty((rows, 9 * cin), dtype=np.float64)
    cdef double[:, ::1] cols
    cdef Py_ssize_t i, r0, r1
    for i in range(n):
        for r0 in range(0, h, step):
            r1 = min(h, r0 + step)
            m = (r1 - r0) * wd
            block = buf[:m]
            cols = block
            with nogil:
                _im2col(x, i, r0, r1, cols)
            g = g_arr[i, r0:r1].reshape(-1, cout)
            dwmat += block.T @ g
            dblock = dbuf[:m]
            np.matmul(g, wmat.T, out=dblock)
            cols = dblock
            with nogil:
                _col2im_add(cols, i, r0, r1, dxv)
    db = g_arr.reshape(-1, cout).sum(axis=0)
    return dx_arr, dwmat.reshape(w_arr.shape), db
