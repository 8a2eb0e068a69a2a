/** Shared types mirroring the review service's HTTP+JSON payloads. */

export const RATING_LEVELS = ["good", "moderate", "bad"] as const;
export type RatingLevel = (typeof RATING_LEVELS)[number];

export interface CaseSummary {
  exam_id: string;
  score: number | null;
  rated: boolean;
}

export interface CaseRating {
  area_rating: RatingLevel;
  slice_rating: RatingLevel;
}

export interface CaseDetail {
  exam_id: string;
  score: number | null;
  label: number;
  n_slices: number;
  slice_weights: number[];
  images: {
    base: string[];
    overlay: string[];
    slicebar: string;
  };
  rating: CaseRating | null;
}

export interface LevelBreakdown {
  counts: Record<RatingLevel, number>;
  percentages: Record<RatingLevel, number | null>;
}

export interface RatingSummary {
  total_rated: number;
  total_cases?: number;
  area: LevelBreakdown;
  slice: LevelBreakdown;
}
