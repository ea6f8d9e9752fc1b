// Typed client for the /v1 reader-study API.

export type Category =
  | "realistic_appearance"
  | "slice_consistency"
  | "anatomical_correctness";

export type Option = "A" | "B" | "C" | "D";

export interface StudyInfo {
  study_id: string;
  n_volumes: number;
  readers: string[];
  categories: Category[];
  options: Option[];
  labels: Record<Category, Record<Option, string>>;
}

export interface NextInfo {
  volume_id: string | null;
  position: number;
  completed: number;
  total: number;
  done: boolean;
}

export interface VolumeMeta {
  volume_id: string;
  shape: number[];
  depth: number;
}

export type OptionCounts = Partial<Record<Option, number>>;

export interface ResultsPayload {
  study_id: string;
  total: number;
  counts: Record<string, Partial<Record<Category, OptionCounts>>>;
  per_reader: Record<string, Partial<Record<Category, OptionCounts>>>;
  threshold_tally: Record<Category, number>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(private baseUrl: string = "", private token: string | null = null) {}

  private headers(): Record<string, string> {
    const h: Record<string, string> = { "Content-Type": "application/json" };
    if (this.token) h["Authorization"] = `Bearer ${this.token}`;
    return h;
  }

  private async get<T>(path: string): Promise<T> {
    const resp = await fetch(this.baseUrl + path, { headers: this.headers() });
    if (!resp.ok) throw new ApiError(resp.status, await resp.text());
    return (await resp.json()) as T;
  }

  async study(studyId: string): Promise<StudyInfo> {
    return this.get(`/v1/studies/${encodeURIComponent(studyId)}`);
  }

  async next(studyId: string, reader: string): Promise<NextInfo> {
    return this.get(`/v1/studies/${encodeURIComponent(studyId)}/next?reader=${encodeURIComponent(reader)}`);
  }

  async volumeMeta(volumeId: string): Promise<VolumeMeta> {
    return this.get(`/v1/volumes/${encodeURIComponent(volumeId)}/meta`);
  }

  sliceUrl(volumeId: string, k: number, window?: [number, number]): string {
    const suffix = window ? `?window=${window[0]},${window[1]}` : "";
    return `${this.baseUrl}/v1/volumes/${encodeURIComponent(volumeId)}/slices/${k}.png${suffix}`;
  }

  async submitRating(studyId: string, reader: string, volumeId: string,
                     category: Category, option: Option): Promise<void> {
    const resp = await fetch(`${this.baseUrl}/v1/ratings`, {
      method: "POST",
      headers: this.headers(),
      body: JSON.stringify({
        study_id: studyId,
        reader_id: reader,
        volume_id: volumeId,
        category,
        option,
      }),
    });
    if (!resp.ok) throw new ApiError(resp.status, await resp.text());
  }

  async answers(studyId: string, reader: string, volumeId: string):
      Promise<Partial<Record<Category, Option>>> {
    const body = await this.get<{ answers: Partial<Record<Category, Option>> }>(
      `/v1/studies/${encodeURIComponent(studyId)}/answers` +
      `?reader=${encodeURIComponent(reader)}&volume=${encodeURIComponent(volumeId)}`);
    return body.answers;
  }

  async results(studyId: string): Promise<ResultsPayload> {
    return this.get(`/v1/studies/${encodeURIComponent(studyId)}/results`);
  }
}
