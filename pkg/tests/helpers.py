from twinsync import geo_data

HEADER = ",".join(geo_data.CSV_COLUMNS)


def write_csv(path, rows, header=HEADER):
    path.write_text(header + "\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return path
