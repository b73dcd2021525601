import os
import json
import logging
from jsonschema import Draft202012Validator, exceptions

DEFAULT_SCHEMA_DIR = os.path.join(
    os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "schemas", "json"
)


class SchemaValidator:
    def __init__(self, schema_dir=DEFAULT_SCHEMA_DIR):
        self.schema_dir = schema_dir
        self.__schemas = {}

    def load_schema(self, schema_name):
        if schema_name not in self.__schemas:
            schema_path = os.path.join(self.schema_dir, f"{schema_name}.json")
            with open(schema_path, "r") as schema_file:
                self.__schemas[schema_name] = json.load(schema_file)
        return self.__schemas[schema_name]

    def validate(self, schema_name, document):
        try:
            schema = self.load_schema(schema_name)
            validator = Draft202012Validator(schema)
            validator.validate(document)
            logging.debug(f"Validation successful: {schema_name}")
            return True
        except FileNotFoundError:
            logging.error(f"Schema file not found: {schema_name}")
            return False
        except exceptions.ValidationError as e:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            logging.error(f"Validation error for {schema_name} at {path}: {e.message}")
            return False
