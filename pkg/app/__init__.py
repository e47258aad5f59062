# Random connection model toolkit
