export interface LabRow {
  name: string;
  unit: string;
  range_low: number | null;
  range_high: number | null;
  count: number;
  min: number;
  max: number;
  median: number;
  n_high: number;
  n_normal: number;
  n_low: number;
  delta: number;
}

export interface PacketHistory {
  n_prior_encounters: number;
  prior_codes: string[];
  prior_diabetes_coded: boolean;
}

export interface Packet {
  token: string;
  demographics: { age_years: number; sex: string; race: string };
  labs: LabRow[];
  meds: string[];
  observations: string[];
  history: PacketHistory;
}

export interface NextCase {
  packet: Packet;
  position: number;
  total: number;
}

export interface QueueDone {
  done: true;
  total: number;
}

export type NextResponse = NextCase | QueueDone;

export function isDone(r: NextResponse): r is QueueDone {
  return (r as QueueDone).done === true;
}

export type Verdict = "diabetic" | "not_diabetic";
export type Confidence = "high" | "low";

export interface Judgment {
  token: string;
  verdict: Verdict;
  confidence: Confidence;
}
