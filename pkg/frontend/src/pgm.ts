// Decoder for the 8-bit binary PGM slices the service returns (base64).

export interface GrayImage {
  width: number;
  height: number;
  pixels: Uint8Array;
}

export function decodeBase64(b64: string): Uint8Array {
  const raw = atob(b64);
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) out[i] = raw.charCodeAt(i);
  return out;
}

export function decodePgm(data: Uint8Array): GrayImage {
  // header: "P5\n<w> <h>\n<maxval>\n" followed by raw bytes
  if (data[0] !== 0x50 || data[1] !== 0x35) {
    throw new Error("not a binary PGM");
  }
  const fields: string[] = [];
  let pos = 2;
  let current = "";
  while (fields.length < 3 && pos < data.length) {
    const ch = data[pos++];
    if (ch === 0x20 || ch === 0x0a || ch === 0x0d || ch === 0x09) {
      if (current.length > 0) {
        fields.push(current);
        current = "";
      }
    } else {
      current += String.fromCharCode(ch);
    }
  }
  const [width, height, maxval] = fields.map(Number);
  if (!(width > 0 && height > 0) || maxval !== 255) {
    throw new Error(`bad PGM header: ${fields.join(" ")}`);
  }
  const pixels = data.slice(pos, pos + width * height);
  if (pixels.length !== width * height) {
    throw new Error("truncated PGM payload");
  }
  return { width, height, pixels };
}
