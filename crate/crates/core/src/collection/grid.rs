use serde::{Deserialize, Serialize};

/// Dense 3-D grid stored X-fastest: `index = x + X * (y + Y * z)`.
///
/// This matches the on-disk voxel order. Viewed as a row-major tensor the
/// spatial axes read `[Z, Y, X]`; conversions to tensors rely on that.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid3<T> {
    shape: [usize; 3],
    data: Vec<T>,
}

impl<T: Copy + Default> Grid3<T> {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Grid3 {
            shape,
            data: vec![T::default(); shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 3], value: T) -> Self {
        Grid3 {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    /// Returns `None` when `data.len()` does not match the shape.
    pub fn from_vec(shape: [usize; 3], data: Vec<T>) -> Option<Self> {
        (data.len() == shape.iter().product::<usize>()).then_some(Grid3 { shape, data })
    }

    #[inline]
    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let x = index % self.shape[0];
        let r = index / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: T) {
        let i = self.index(x, y, z);
        self.data[i] = v;
    }

    /// Signed lookup; `None` outside the grid.
    #[inline]
    pub fn get_signed(&self, x: isize, y: isize, z: isize) -> Option<T> {
        let [sx, sy, sz] = self.shape;
        (x >= 0 && y >= 0 && z >= 0 && (x as usize) < sx && (y as usize) < sy && (z as usize) < sz)
            .then(|| self.get(x as usize, y as usize, z as usize))
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy + Default>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Sub-block starting at `origin` (may be negative or run past the end);
    /// out-of-range coordinates are clamped, i.e. edge replication.
    pub fn crop_replicate(&self, origin: [isize; 3], shape: [usize; 3]) -> Grid3<T> {
        let mut out = Grid3::zeros(shape);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut i = 0;
        for z in 0..shape[2] {
            let sz = clamp(origin[2] + z as isize, self.shape[2]);
            for y in 0..shape[1] {
                let sy = clamp(origin[1] + y as isize, self.shape[1]);
                for x in 0..shape[0] {
                    let sx = clamp(origin[0] + x as isize, self.shape[0]);
                    out.data[i] = self.get(sx, sy, sz);
                    i += 1;
                }
            }
        }
        out
    }
}

impl Grid3<u8> {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}
