use crate::scalar::Scalar;

/// Axis-aligned rectangle `[x_min, y_min, x_max, y_max]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect<T> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> Rect<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Self {
        Self { x_min, y_min, x_max, y_max }
    }

    pub fn area(&self) -> T {
        let w = (self.x_max - self.x_min).max_of(T::zero());
        let h = (self.y_max - self.y_min).max_of(T::zero());
        w * h
    }

    pub fn intersection_area(&self, other: &Self) -> T {
        let w = (self.x_max.min_of(other.x_max) - self.x_min.max_of(other.x_min)).max_of(T::zero());
        let h = (self.y_max.min_of(other.y_max) - self.y_min.max_of(other.y_min)).max_of(T::zero());
        w * h
    }

    /// Intersection over union; 0 when the union is empty.
    pub fn iou(&self, other: &Self) -> T {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > T::zero() {
            inter / union
        } else {
            T::zero()
        }
    }
}

pub fn iou<T: Scalar>(a: &Rect<T>, b: &Rect<T>) -> T {
    a.iou(b)
}
